"""Few-shot class-incremental protocol: data layout, three training stages,
prototype classifier and cumulative evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import ClassifierHead, HeadSnapshot, MlpBackbone, Sgd, backward_and_step, extend_head
from .datagen import (ImageSet, JitterConfig, extract_features, generate_dataset,
                      generate_virtual_classes, random_class_specs)
from .losses import CenterBank, ProtocolError, ce_loss_batch, ct_loss_batch, kd_loss_batch
from .metrics import EvalReport, SessionResult, Track
from .numerics import DegenerateInputError, Rng
from .pfs import (assemble_replay_set, build_memory_bank, resolve_threshold,
                  synthesize_pseudo_features)

log = logging.getLogger(__name__)

# sub-stream ids for Rng.derive
_DATA, _VCG, _INIT, _STAGE1, _BANK, _STAGE2, _SYNTH, _STAGE3 = range(8)


@dataclass
class SessionSpec:
    session_id: int
    classes: list
    train: ImageSet
    test: ImageSet
    n_way: int | None = None
    k_shot: int | None = None

    def validate(self):
        train_classes = set(np.unique(self.train.labels).tolist())
        if not train_classes <= set(self.classes) or not set(np.unique(self.test.labels).tolist()) <= set(self.classes):
            raise ProtocolError(f"session {self.session_id}: labels outside its label space")
        if self.session_id == 0:
            return
        if len(self.classes) != self.n_way:
            raise ProtocolError(f"session {self.session_id}: {len(self.classes)} classes, expected {self.n_way}-way")
        for c in self.classes:
            k = int(np.count_nonzero(self.train.labels == c))
            if k != self.k_shot:
                raise ProtocolError(f"session {self.session_id}: class {c} has {k} shots, expected {self.k_shot}")


def validate_sessions(sessions):
    if not sessions or sessions[0].session_id != 0:
        raise ProtocolError("the session list must start with the base session 0")
    seen = set()
    for i, s in enumerate(sessions):
        if s.session_id != i:
            raise ProtocolError(f"session ids must be consecutive; got {s.session_id} at position {i}")
        overlap = seen & set(s.classes)
        if overlap:
            raise ProtocolError(f"session {i} reuses classes {sorted(overlap)} from earlier sessions")
        seen |= set(s.classes)
        s.validate()
    if sorted(seen) != list(range(len(seen))):
        raise ProtocolError("class ids across sessions must form a contiguous 0-based range")


def jitter_from_config(d):
    return JitterConfig(d.position_jitter, d.rotation, d.brightness_jitter,
                        d.noise_std, d.scale_jitter, d.distractor_prob)


def build_protocol(cfg):
    """Render the synthetic benchmark described by ``cfg.data``.

    Base classes get ``train_per_class`` training images; each incremental
    class gets exactly ``k_shot``.
    """
    d = cfg.data
    rng = Rng(cfg.run.seed).derive(_DATA)
    n_total = d.n_base_classes + d.n_sessions * d.n_way
    specs = random_class_specs(n_total, rng, d.hue_clusters, d.hue_spread)
    train_counts = [d.train_per_class] * d.n_base_classes + [d.k_shot] * (n_total - d.n_base_classes)
    train, test = generate_dataset(specs, train_counts, d.test_per_class,
                                   jitter_from_config(d), rng, d.image_size)
    sessions = split_sessions(train, test, d.n_base_classes, d.n_sessions, d.n_way, d.k_shot)
    return sessions, specs


def split_sessions(train, test, n_base, n_sessions, n_way, k_shot):
    layout = [list(range(n_base))]
    for i in range(n_sessions):
        layout.append(list(range(n_base + i * n_way, n_base + (i + 1) * n_way)))
    sessions = []
    for i, classes in enumerate(layout):
        tr = train.subset(np.isin(train.labels, classes))
        te = test.subset(np.isin(test.labels, classes))
        sessions.append(SessionSpec(i, classes, tr, te, None if i == 0 else n_way, None if i == 0 else k_shot))
    validate_sessions(sessions)
    return sessions


def _lr_at(stage_cfg, epoch, n_epochs):
    if stage_cfg.schedule == "constant" or n_epochs <= 1:
        return stage_cfg.learning_rate
    return 0.5 * stage_cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / n_epochs))


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


@dataclass
class PipelineState:
    backbone: MlpBackbone
    head: ClassifierHead
    centers: CenterBank | None
    switches: dict
    banks: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    session_id: int = 0
    stage: str = "stage1"
    n_real_base: int = 0
    backbone_checksum: str | None = None
    loss_history: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n_seen(self):
        return self.head.n_classes

    def check_frozen(self):
        if not self.backbone.frozen or self.backbone.checksum() != self.backbone_checksum:
            raise ProtocolError("backbone parameters changed after stage 1")


def stage1_forward_compatible_train(base, cfg, virtual=None):
    """Train backbone + wide head on real (and virtual) base classes.

    ``virtual`` may carry a precomputed ``(image_set, transforms)`` pair from
    :func:`generate_virtual_classes`; otherwise it is generated here when the
    VCG switch is on. The backbone is frozen on return.
    """
    s1 = cfg.stage1
    if s1.ct_weight < 0 or s1.margin < 0:
        raise ProtocolError("degenerate stage-1 config: negative CT weight or margin")
    n_real = len(base.classes)
    counts = np.bincount(base.train.labels, minlength=n_real)
    if n_real < 2 or counts.min() < 2:
        raise ProtocolError("stage 1 needs >= 2 base classes with several samples each")
    root = Rng(cfg.run.seed)
    switches = cfg.switches()
    if switches["vcg"] and s1.fold > 0:
        if virtual is None:
            virtual = generate_virtual_classes(base.train, s1.fold, root.derive(_VCG), n_real)
        train = virtual[0]
        n_train_classes = n_real * (1 + s1.fold)
    else:
        train = base.train
        n_train_classes = n_real

    init = root.derive(_INIT)
    m = cfg.model
    backbone = MlpBackbone.init(int(np.prod(train.image_shape)), m.hidden_dims, m.feature_dim, init)
    head = ClassifierHead.init(m.feature_dim, n_train_classes, init, use_bias=m.head_bias)
    use_ct = switches["ct"] and s1.ct_weight > 0
    centers = CenterBank(n_train_classes, m.feature_dim, s1.center_rate) if use_ct else None

    x = train.flat()
    y = train.labels
    opt = Sgd(s1.learning_rate, s1.momentum, s1.weight_decay)
    rng = root.derive(_STAGE1)
    n_epochs = cfg.epochs("stage1")
    history = []
    for epoch in range(n_epochs):
        opt.learning_rate = _lr_at(s1, epoch, n_epochs)
        total, count = 0.0, 0
        for idx in _batches(len(y), s1.batch_size, rng):
            xb, yb = x[idx], y[idx]
            feats = backbone.forward(xb, keep_cache=True)
            loss, g_logits = ce_loss_batch(head.logits(feats), yb)
            head_grads, g_feats = head.backward(feats, g_logits)
            if use_ct:
                centers.update(feats, yb)
                if np.count_nonzero(centers.initialized) >= 2:
                    ct, g_ct = ct_loss_batch(feats, yb, centers, s1.margin)
                    loss += s1.ct_weight * ct
                    g_feats = g_feats + s1.ct_weight * g_ct
            grads = {"head": head_grads, "backbone": backbone.backward(g_feats)}
            backward_and_step(backbone, head, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("stage1 epoch %d loss %.5f", epoch, history[-1])

    backbone.frozen = True
    state = PipelineState(backbone, head, centers, switches, n_real_base=n_real,
                          backbone_checksum=backbone.checksum())
    state.loss_history["stage1"] = history
    return state


def _train_head(head, feats, labels, stage_cfg, n_epochs, rng, teacher=None, kd_weight=0.0,
                temperature=1.0, reverse=False):
    opt = Sgd(stage_cfg.learning_rate, stage_cfg.momentum, stage_cfg.weight_decay)
    use_kd = teacher is not None and kd_weight > 0
    if use_kd:
        n_old = teacher.n_classes
        teacher_logits = teacher.logits(feats)
    history = []
    for epoch in range(n_epochs):
        opt.learning_rate = _lr_at(stage_cfg, epoch, n_epochs)
        total = 0.0
        for idx in _batches(len(labels), stage_cfg.batch_size, rng):
            fb = feats[idx]
            logits = head.logits(fb)
            loss, g = ce_loss_batch(logits, labels[idx])
            if use_kd:
                kd, g_kd = kd_loss_batch(logits[:, :n_old], teacher_logits[idx], temperature, reverse)
                loss += kd_weight * kd
                g[:, :n_old] += kd_weight * g_kd
            grads, _ = head.backward(fb, g)
            backward_and_step(None, head, {"head": grads}, opt)
            total += loss * len(idx)
        history.append(total / len(labels))
    return history


def _class_features(feats, labels, classes):
    return {c: feats[labels == c] for c in classes}


def _capture_memory(state, cfg, session_id, class_feats):
    """Build banks for ``class_feats`` and synthesize their pseudo-features
    with the current head (the end-of-session model)."""
    root = Rng(cfg.run.seed)
    threshold = resolve_threshold(cfg.pfs.entropy_threshold, state.head.n_classes,
                                  cfg.pfs.threshold_fraction)
    while len(state.thresholds) <= session_id:
        state.thresholds.append(None)
    state.thresholds[session_id] = threshold
    n_pseudo = cfg.pfs.n_pseudo if state.switches["pfs"] else 0
    for c, f in class_feats.items():
        bank = build_memory_bank(c, f, cfg.stage2.n_stored, root.derive(_BANK, c), session_id)
        bank.pseudo = synthesize_pseudo_features(
            bank, state.head, n_pseudo, threshold, max(n_pseudo * cfg.pfs.attempts_per_feature, n_pseudo),
            root.derive(_SYNTH, c), use_uncertainty=state.switches["us"])
        if bank.fallbacks:
            state.warnings.append(f"session {session_id} class {c}: {bank.fallbacks} pseudo-feature fallback(s)")
        state.banks[c] = bank


def stage2_base_finetune(state, base, cfg):
    """Drop virtual columns and fine-tune the real-class head on stored features."""
    if state is None or state.stage != "stage1":
        raise ProtocolError("stage 2 requires a completed stage 1")
    if not state.backbone.frozen:
        raise ProtocolError("stage 2 requires a frozen backbone")
    root = Rng(cfg.run.seed)
    n_real = state.n_real_base
    feats = extract_features(state.backbone, base.train).features
    labels = base.train.labels
    class_feats = _class_features(feats, labels, base.classes)
    state.head = state.head.restrict(n_real)
    state.head.session_id = 0
    state.centers = None

    banks = {c: build_memory_bank(c, f, cfg.stage2.n_stored, root.derive(_BANK, c), 0)
             for c, f in class_feats.items()}
    if cfg.stage2.enabled:
        ft_x = np.concatenate([banks[c].stored for c in base.classes])
        ft_y = np.concatenate([np.full(banks[c].stored.shape[0], c) for c in base.classes])
        state.loss_history["stage2"] = _train_head(
            state.head, ft_x, ft_y, cfg.stage2, cfg.epochs("stage2"), root.derive(_STAGE2))
    _capture_memory(state, cfg, 0, class_feats)
    state.snapshots.append(HeadSnapshot.capture(state.head))
    state.stage = "base-done"
    state.check_frozen()
    return state


def stage3_incremental_session(state, session, cfg):
    if session.session_id < 1 or session.session_id != state.session_id + 1:
        raise ProtocolError(f"expected session {state.session_id + 1}, got {session.session_id}")
    if len(state.snapshots) != session.session_id:
        raise ProtocolError("missing head snapshot of the previous session")
    session.validate()
    if session.classes != list(range(state.n_seen, state.n_seen + len(session.classes))):
        raise ProtocolError(f"session {session.session_id} classes must continue the seen label range")
    state.check_frozen()
    s3 = cfg.stage3
    root = Rng(cfg.run.seed)
    feats = extract_features(state.backbone, session.train).features
    labels = session.train.labels
    class_feats = _class_features(feats, labels, session.classes)

    old_classes = list(range(state.n_seen))
    if cfg.model.head_init == "imprint":
        # direction of the class mean, magnitude of the existing columns
        col_norm = float(np.linalg.norm(state.head.weight, axis=0).mean())
        protos = []
        for c in session.classes:
            mu = class_feats[c].mean(axis=0)
            protos.append(mu * (col_norm / np.linalg.norm(mu)))
    else:
        bound = 1.0 / math.sqrt(state.head.dim)
        init = root.derive(_INIT, session.session_id)
        protos = [init.uniform(-bound, bound, state.head.dim) for _ in session.classes]
    state.head = extend_head(state.head, protos, session.session_id)

    replay_x, replay_y = assemble_replay_set(
        state.banks, old_classes, feats, labels,
        include_pseudo=state.switches["pfs"], include_stored=cfg.pfs.replay_stored)
    teacher = state.snapshots[-1]
    hist = _train_head(state.head, replay_x, replay_y, s3, cfg.epochs("stage3"),
                       root.derive(_STAGE3, session.session_id), teacher=teacher,
                       kd_weight=s3.kd_weight, temperature=s3.temperature, reverse=s3.reverse_kd)
    state.loss_history[f"session{session.session_id}"] = hist
    _capture_memory(state, cfg, session.session_id, class_feats)
    state.snapshots.append(HeadSnapshot.capture(state.head))
    state.session_id = session.session_id
    state.check_frozen()
    return state


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    similarity: str = "cosine"

    @property
    def n_classes(self):
        return self.prototypes.shape[0]


def compute_prototypes(features_by_class, similarity="cosine"):
    """One mean feature per class; ``features_by_class`` is ordered by class id."""
    protos = np.stack([np.asarray(f, dtype=np.float64).mean(axis=0) for f in features_by_class])
    return PrototypeSet(protos, similarity)


def ncm_scores(prototypes, features):
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    p = prototypes.prototypes
    if f.shape[1] != p.shape[1]:
        raise ValueError(f"feature dimension {f.shape[1]} != prototype dimension {p.shape[1]}")
    if prototypes.similarity == "cosine":
        fn = np.linalg.norm(f, axis=1, keepdims=True)
        pn = np.linalg.norm(p, axis=1)
        if np.any(fn == 0.0) or np.any(pn == 0.0):
            raise DegenerateInputError("zero-norm vector in cosine NCM")
        return (f / fn) @ (p / pn[:, None]).T
    sq = (f**2).sum(1)[:, None] - 2 * f @ p.T + (p**2).sum(1)[None, :]
    return -np.sqrt(np.maximum(sq, 0.0))


def ncm_classify(prototypes, features):
    """Most similar prototype; ties go to the lowest class index."""
    scores = ncm_scores(prototypes, features)
    out = np.argmax(scores, axis=1)
    return int(out[0]) if np.ndim(features) == 1 else out


def state_prototypes(state, similarity="cosine"):
    return PrototypeSet(np.stack([state.banks[c].mean for c in range(state.n_seen)]), similarity)


def evaluate(state, test_pool, session_id, tracks=("softmax", "ncm"), similarity="cosine"):
    feats = extract_features(state.backbone, test_pool).features
    labels = test_pool.labels
    n = state.n_seen
    out = {}
    if "softmax" in tracks:
        pred = np.argmax(state.head.logits(feats), axis=1)
        out["softmax"] = SessionResult.from_predictions(session_id, pred, labels, n, "softmax")
    if "ncm" in tracks:
        pred = ncm_classify(state_prototypes(state, similarity), feats)
        out["ncm"] = SessionResult.from_predictions(session_id, pred, labels, n, "ncm")
    return out


def _track_names(cfg):
    return ("softmax", "ncm") if cfg.eval.track == "both" else (cfg.eval.track,)


def new_report(cfg):
    return EvalReport(cfg.run.seed, cfg.to_dict(), [Track(t) for t in _track_names(cfg)])


def _record(report, state, sessions, upto, cfg):
    pool = ImageSet.concat([s.test for s in sessions[:upto + 1]])
    results = evaluate(state, pool, upto, _track_names(cfg), cfg.eval.similarity)
    for t in report.tracks:
        t.sessions.append(results[t.name])


def run_pipeline(sessions, cfg, checkpoint_dir=None, state=None, report=None, stop_after=None):
    """Run all stages over ``sessions`` and return ``(report, state)``.

    Passing a ``state``/``report`` pair loaded from a checkpoint resumes after
    ``state.session_id``. ``stop_after`` ends the run after that session id.
    """
    from .checkpoint import save_checkpoint

    validate_sessions(sessions)
    if state is None:
        report = new_report(cfg)
        state = stage1_forward_compatible_train(sessions[0], cfg)
        state = stage2_base_finetune(state, sessions[0], cfg)
        _record(report, state, sessions, 0, cfg)
        if checkpoint_dir is not None:
            save_checkpoint(state, report, cfg, f"{checkpoint_dir}/session0.npz")
    for s in sessions[state.session_id + 1:]:
        if stop_after is not None and s.session_id > stop_after:
            break
        state = stage3_incremental_session(state, s, cfg)
        _record(report, state, sessions, s.session_id, cfg)
        if checkpoint_dir is not None:
            save_checkpoint(state, report, cfg, f"{checkpoint_dir}/session{s.session_id}.npz")
    report.warnings = list(state.warnings)
    return report, state


def naive_finetune_config(cfg):
    """All switches off, no KD, no replay: the forgetting baseline."""
    return cfg.with_ablation(["vcg", "ct", "pfs", "us"]).replace(
        stage3={"kd_weight": 0.0}, pfs={"n_pseudo": 0, "replay_stored": False})


def feature_separation_ratio(features, labels):
    """Mean distance to own class mean divided by the smallest gap between class means."""
    classes = np.unique(labels)
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    intra = np.mean([np.linalg.norm(features[labels == c] - means[i], axis=1).mean()
                     for i, c in enumerate(classes)])
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    gaps[np.diag_indices_from(gaps)] = np.inf
    return float(intra / gaps.min())
