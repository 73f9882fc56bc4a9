"""Command-line entry point: ``pillfscil <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, dump_config, load_config
from .datagen import ImageSet
from .losses import ProtocolError
from .metrics import (ReportError, average_accuracy, confusion_csv, emit_report, load_report,
                      performance_drop, round_half_up)
from .pfs import audit_pseudo_features
from .sessions import SessionSpec, build_protocol, run_pipeline, validate_sessions

log = logging.getLogger("pillfscil")

SPLIT_HEADER = "# pillfscil session split v1"


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("FSCIL_LOG_LEVEL", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"FSCIL_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def _load_cfg(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    if getattr(args, "ablate", None):
        cfg = cfg.with_ablation([t.strip() for t in args.ablate.split(",") if t.strip()])
    if getattr(args, "track", None):
        cfg = cfg.replace(eval={"track": args.track})
    return cfg


def write_split_file(sessions, train_index, test_index, path):
    """Text file with one ``session <id> <field> <comma list>`` line per field."""
    lines = [SPLIT_HEADER]
    for s in sessions:
        lines.append(f"session {s.session_id} classes " + ",".join(map(str, s.classes)))
        if s.session_id:
            lines.append(f"session {s.session_id} shape {s.n_way},{s.k_shot}")
        lines.append(f"session {s.session_id} train " + ",".join(map(str, train_index[s.session_id])))
        lines.append(f"session {s.session_id} test " + ",".join(map(str, test_index[s.session_id])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_file(path):
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != SPLIT_HEADER:
        raise UsageError(f"{path}: missing split header")
    out = {}
    for n, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(" ", 3)
        if len(parts) != 4 or parts[0] != "session" or parts[2] not in ("classes", "shape", "train", "test"):
            raise UsageError(f"{path}:{n}: malformed line")
        values = [int(v) for v in parts[3].split(",") if v]
        out.setdefault(int(parts[1]), {})[parts[2]] = values
    return out


def save_data(sessions, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    train = ImageSet.concat([s.train for s in sessions])
    test = ImageSet.concat([s.test for s in sessions])
    train_index, test_index, t0, e0 = {}, {}, 0, 0
    for s in sessions:
        train_index[s.session_id] = list(range(t0, t0 + len(s.train)))
        test_index[s.session_id] = list(range(e0, e0 + len(s.test)))
        t0 += len(s.train)
        e0 += len(s.test)
    with open(outdir / "images.npz", "wb") as fh:
        np.savez(fh, train_pixels=train.pixels.astype("<f8"), train_labels=train.labels.astype("<i8"),
                 test_pixels=test.pixels.astype("<f8"), test_labels=test.labels.astype("<i8"))
    write_split_file(sessions, train_index, test_index, outdir / "splits.txt")


def load_data(datadir):
    datadir = Path(datadir)
    if not (datadir / "images.npz").exists() or not (datadir / "splits.txt").exists():
        raise UsageError(f"{datadir}: expected images.npz and splits.txt (see gen-data)")
    with np.load(datadir / "images.npz", allow_pickle=False) as z:
        train = ImageSet(z["train_pixels"], z["train_labels"])
        test = ImageSet(z["test_pixels"], z["test_labels"])
    split = read_split_file(datadir / "splits.txt")
    sessions = []
    for sid in sorted(split):
        entry = split[sid]
        n_way, k_shot = entry.get("shape", (None, None))
        sessions.append(SessionSpec(sid, entry["classes"], train.subset(np.asarray(entry["train"], dtype=np.int64)),
                                    test.subset(np.asarray(entry["test"], dtype=np.int64)), n_way, k_shot))
    validate_sessions(sessions)
    return sessions


def _sessions_for(args, cfg):
    if getattr(args, "data", None):
        return load_data(args.data)
    sessions, _ = build_protocol(cfg)
    return sessions


def _finish_report(report, path, started):
    report.timestamps = {"started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    if path:
        emit_report(report, path)
    for t in report.tracks:
        accs = ", ".join(f"{round_half_up(a):.2f}" for a in t.accuracies)
        print(f"{t.name}: [{accs}] AA={round_half_up(t.aa):.2f} PD={round_half_up(t.pd):.2f}")


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    sessions, _ = build_protocol(cfg)
    save_data(sessions, args.out)
    dump_config(cfg, Path(args.out) / "config.toml")
    print(f"wrote {sum(len(s.train) for s in sessions)} train / {sum(len(s.test) for s in sessions)} "
          f"test images in {len(sessions)} sessions to {args.out}")


def cmd_run(args):
    cfg = _load_cfg(args)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    sessions = _sessions_for(args, cfg)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    report, _ = run_pipeline(sessions, cfg, checkpoint_dir=args.checkpoint_dir, stop_after=args.stop_after)
    _finish_report(report, args.report, started)


def cmd_resume(args):
    state, report, cfg = load_checkpoint(args.checkpoint)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    sessions = _sessions_for(args, cfg)
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    report, _ = run_pipeline(sessions, cfg, checkpoint_dir=args.checkpoint_dir, state=state, report=report)
    _finish_report(report, args.report, started)


def cmd_metrics(args):
    try:
        accs = [float(a) for a in args.accuracies.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(f"--accuracies must be comma-separated numbers ({exc})") from exc
    if not accs:
        raise UsageError("--accuracies is empty")
    print(f"AA={round_half_up(average_accuracy(accs)):.2f} PD={round_half_up(performance_drop(accs)):.2f}")


def cmd_pfs_audit(args):
    state, _, cfg = load_checkpoint(args.checkpoint)
    snapshots = {s.session_id: s for s in state.snapshots}
    violations = []
    n_checked = n_fallback = 0
    q = cfg.pfs.n_pseudo if state.switches["pfs"] else 0
    for c in sorted(state.banks):
        bank = state.banks[c]
        head = snapshots[bank.session_id]
        threshold = state.thresholds[bank.session_id]
        violations += audit_pseudo_features(bank, head, threshold, use_uncertainty=state.switches["us"])
        n_fb = sum(p.fallback for p in bank.pseudo)
        n_fallback += n_fb
        n_checked += len(bank.pseudo) - n_fb
        if len(bank.pseudo) != q:
            violations.append(f"class {c}: {len(bank.pseudo)} pseudo-features, expected {q}")
        if n_fb != bank.fallbacks:
            violations.append(f"class {c}: {n_fb} fallback entries but {bank.fallbacks} recorded")
    summary = {"classes": len(state.banks), "accepted_checked": n_checked, "fallbacks": n_fallback,
               "violations": len(violations)}
    for v in violations:
        print("VIOLATION", v)
    print(json.dumps(summary, sort_keys=True))
    return 0 if not violations else 1


def cmd_report(args):
    report = load_report(args.input)
    emit_report(report, args.output, fmt="csv")
    if args.confusion_dir:
        d = Path(args.confusion_dir)
        d.mkdir(parents=True, exist_ok=True)
        for t in report.tracks:
            for s in t.sessions:
                (d / f"{t.name}_session{s.session_id}.csv").write_text(confusion_csv(s), encoding="utf-8")
    print(f"wrote {args.output}")


def build_parser():
    p = argparse.ArgumentParser(prog="pillfscil", description="Few-shot class-incremental pill recognition")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)")
        if data:
            sp.add_argument("--data", help="directory written by gen-data")

    g = sub.add_parser("gen-data", help="render the synthetic benchmark")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run all stages and sessions")
    common(r)
    r.add_argument("--ablate", help="comma list of switches to disable: vcg,ct,pfs,us")
    r.add_argument("--track", choices=("softmax", "ncm", "both"))
    r.add_argument("--report", help="write the JSON report here")
    r.add_argument("--checkpoint-dir", help="save a checkpoint after every session")
    r.add_argument("--stop-after", type=int, help="stop after this session id")
    r.set_defaults(func=cmd_run)

    rs = sub.add_parser("resume", help="continue a run from a checkpoint")
    rs.add_argument("--checkpoint", required=True)
    rs.add_argument("--data", help="directory written by gen-data")
    rs.add_argument("--report")
    rs.add_argument("--checkpoint-dir")
    rs.set_defaults(func=cmd_resume)

    m = sub.add_parser("metrics", help="AA and PD from per-session accuracies")
    m.add_argument("--accuracies", required=True, help="comma-separated percentages, base session first")
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("pfs-audit", help="re-verify pseudo-features stored in a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.set_defaults(func=cmd_pfs_audit)

    rp = sub.add_parser("report", help="convert a JSON report to CSV")
    rp.add_argument("--in", dest="input", required=True)
    rp.add_argument("--out", dest="output", required=True)
    rp.add_argument("--confusion-dir", help="also write per-session confusion CSVs here")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        code = args.func(args)
    except (UsageError, ConfigError, ReportError, CheckpointError, ProtocolError,
            FileNotFoundError, ValueError) as exc:
        print(f"pillfscil {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
