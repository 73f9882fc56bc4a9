"""Session-boundary checkpoints.

A checkpoint is an uncompressed ``.npz`` archive. Every numeric array is
stored as little-endian float64 (``<f8``) or int64 (``<i8``); a ``meta`` entry
holds UTF-8 JSON with layer shapes, head width, session id, switches, config,
RNG state, per-bank metadata and the partial report. Loading reproduces every
array bit-for-bit.
"""

from __future__ import annotations

import json

import numpy as np

from .backbone import ClassifierHead, HeadSnapshot, MlpBackbone
from .config import Config
from .metrics import EvalReport
from .numerics import Rng
from .pfs import ClassMemoryBank, PseudoFeature

FORMAT = "pillfscil-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _f8(a):
    return np.ascontiguousarray(a, dtype="<f8")


def save_checkpoint(state, report, cfg, path):
    arrays = {}
    for i, (w, b) in enumerate(zip(state.backbone.weights, state.backbone.biases)):
        arrays[f"backbone/W{i}"] = _f8(w)
        arrays[f"backbone/b{i}"] = _f8(b)
    arrays["head/W"] = _f8(state.head.weight)
    if state.head.bias is not None:
        arrays["head/b"] = _f8(state.head.bias)
    for k, snap in enumerate(state.snapshots):
        arrays[f"snapshot{k}/W"] = _f8(snap.weight)
        if snap.bias is not None:
            arrays[f"snapshot{k}/b"] = _f8(snap.bias)
    banks_meta = []
    for c in sorted(state.banks):
        bank = state.banks[c]
        arrays[f"bank{c}/stored"] = _f8(bank.stored)
        arrays[f"bank{c}/mean"] = _f8(bank.mean)
        if bank.pseudo:
            arrays[f"bank{c}/pseudo"] = _f8(np.stack([p.vector for p in bank.pseudo]))
            arrays[f"bank{c}/alpha"] = _f8([p.alpha for p in bank.pseudo])
            arrays[f"bank{c}/entropy"] = _f8([p.entropy for p in bank.pseudo])
            arrays[f"bank{c}/index"] = np.asarray([p.stored_index for p in bank.pseudo], dtype="<i8")
            arrays[f"bank{c}/fallback"] = np.asarray([p.fallback for p in bank.pseudo], dtype="<i8")
        banks_meta.append({"class_id": c, "session_id": bank.session_id, "fallbacks": bank.fallbacks,
                           "n_pseudo": len(bank.pseudo)})
    meta = {
        "format": FORMAT,
        "layers": [list(w.shape) for w in state.backbone.weights],
        "frozen": state.backbone.frozen,
        "backbone_checksum": state.backbone_checksum,
        "head_columns": state.head.n_classes,
        "head_session_id": state.head.session_id,
        "snapshot_sessions": [s.session_id for s in state.snapshots],
        "session_id": state.session_id,
        "stage": state.stage,
        "n_real_base": state.n_real_base,
        "switches": state.switches,
        "thresholds": state.thresholds,
        "banks": banks_meta,
        "warnings": state.warnings,
        "loss_history": state.loss_history,
        "rng_state": Rng(cfg.run.seed).derive(state.session_id).get_state(),
        "config": cfg.to_dict(),
        "report": report.to_dict() if report is not None else None,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(state, report, cfg)``."""
    from .sessions import PipelineState

    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r}")
    n_layers = len(meta["layers"])
    backbone = MlpBackbone([arrays[f"backbone/W{i}"] for i in range(n_layers)],
                           [arrays[f"backbone/b{i}"] for i in range(n_layers)])
    for i, shape in enumerate(meta["layers"]):
        if list(backbone.weights[i].shape) != shape:
            raise CheckpointError(f"{path}: layer {i} shape mismatch")
    backbone.frozen = meta["frozen"]
    head = ClassifierHead(arrays["head/W"], arrays.get("head/b"), meta["head_session_id"])
    if head.n_classes != meta["head_columns"]:
        raise CheckpointError(f"{path}: head column count mismatch")
    snapshots = []
    for k, sid in enumerate(meta["snapshot_sessions"]):
        snapshots.append(HeadSnapshot.capture(
            ClassifierHead(arrays[f"snapshot{k}/W"], arrays.get(f"snapshot{k}/b"), sid)))
    banks = {}
    for bm in meta["banks"]:
        c = bm["class_id"]
        bank = ClassMemoryBank(c, arrays[f"bank{c}/stored"], arrays[f"bank{c}/mean"], bm["session_id"],
                               fallbacks=bm["fallbacks"])
        if bm["n_pseudo"]:
            vecs, alphas = arrays[f"bank{c}/pseudo"], arrays[f"bank{c}/alpha"]
            ents, idx, fb = arrays[f"bank{c}/entropy"], arrays[f"bank{c}/index"], arrays[f"bank{c}/fallback"]
            bank.pseudo = [PseudoFeature(vecs[i], c, float(alphas[i]), float(ents[i]), int(idx[i]), bool(fb[i]))
                           for i in range(bm["n_pseudo"])]
        banks[c] = bank
    state = PipelineState(backbone, head, None, meta["switches"], banks, snapshots, meta["thresholds"],
                          meta["session_id"], meta["stage"], meta["n_real_base"], meta["backbone_checksum"],
                          meta["loss_history"], meta["warnings"])
    if backbone.frozen and backbone.checksum() != state.backbone_checksum:
        raise CheckpointError(f"{path}: backbone checksum mismatch")
    cfg = Config.from_dict(meta["config"])
    report = EvalReport.from_dict(meta["report"]) if meta["report"] is not None else None
    return state, report, cfg
