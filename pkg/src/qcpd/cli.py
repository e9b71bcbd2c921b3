"""Command-line entry point: ``qcpd <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autoencoder import (
    DenseAutoencoder,
    ModelBundle,
    TrainConfig,
    grid_search,
    load_model,
    save_model,
    train,
)
from .core import DataError, NumericError, QcpdError
from .detect import build_profile, canonical_statistic, detect_batch, load_profile, run_online, save_profile
from .evaluation import (
    DEFAULT_ALPHAS,
    RunRecord,
    auroc,
    best_f1,
    clean_for_json,
    emit_cdf_csv,
    emit_roc_csv,
    labeled_scores,
    metrics,
    write_json,
)
from .ingest import load_dataset, load_tensor, positions_to_accel, save_dataset, save_tensor
from .pipeline import ExperimentConfig, chen_window_sweep, default_jobs, run_experiment, split_calibration
from .preprocess import WindowSet, apply_norm, fit_norm
from .score import idfn_series
from .synth import GENERATORS, config_from_dict, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("qcpd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON {path}: {exc}") from exc


def _stat(name: str) -> str:
    return canonical_statistic(name)


def _alphas(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise DataError(f"--alpha expects comma-separated numbers, got {text!r}") from None
    if not vals or any(not 0 < a <= 1 for a in vals):
        raise DataError("--alpha levels must lie in (0, 1]")
    return vals


# -- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    count = int(doc.pop("count", 1))
    normal = bool(doc.pop("normal", False))
    if args.seed is not None:
        doc["seed"] = args.seed
    base = config_from_dict(args.kind, doc)
    seed0 = base.seed
    out = Path(args.out)
    items = []
    for i in range(count):
        cfg = config_from_dict(args.kind, {**doc, "seed": seed0 + i})
        cfg = cfg.normal() if normal else cfg
        items.append((f"seq_{i:04d}", generate(args.kind, cfg)))
    if count == 1:
        save_tensor(items[0][1], out)
    else:
        save_dataset(items, out)
    print(f"wrote {count} sequence(s) to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    src = Path(args.positions)
    tensor = load_tensor(src.parent if src.is_file() else src)
    accel = positions_to_accel(tensor, args.sg_window, args.sg_order)
    save_tensor(accel, args.out, ["ax", "ay", "az"])
    print(f"wrote acceleration tensor to {args.out}")
    return EXIT_OK


def _tensors(path) -> list:
    return [t for _, t in load_dataset(path)]


def cmd_train(args) -> int:
    tensors = _tensors(args.data)
    cfg = TrainConfig(lr_init=args.lr, max_epochs=args.epochs, batch_size=args.batch_size,
                      dropout=args.dropout, seed=args.seed)
    stats = fit_norm(tensors)
    windows = WindowSet([apply_norm(x, stats) for x in tensors], args.window)
    F = tensors[0].F
    if args.grid_search:
        model, report, table = grid_search(windows, cfg)
        extra = {"grid": table}
    else:
        hidden = tuple(int(h) for h in args.hidden.split(","))
        model = DenseAutoencoder.create(F * args.window, hidden, cfg.dropout, cfg.seed)
        model, report = train(model, windows, cfg)
        extra = {}
    meta = {"train": report.to_dict(), "seed": args.seed, **extra}
    save_model(args.out, ModelBundle(model, stats, args.window, meta))
    print(f"trained {model.layer_sizes} for {report.epochs_run} epoch(s); best val {report.best_val_loss:.6g}")
    return EXIT_OK


def cmd_score(args) -> int:
    bundle = load_model(args.model)
    out = Path(args.out)
    datasets = load_dataset(args.data)
    multi = len(datasets) > 1
    for name, tensor in datasets:
        idfn = idfn_series(bundle.model, tensor, bundle.stats, bundle.window)
        path = out / f"{name}.csv" if multi else out
        path.parent.mkdir(parents=True, exist_ok=True)
        mask = tensor.active()
        with open(path, "w") as fh:
            fh.write("time,entity,idfn\n")
            for t in range(idfn.T):
                for p in range(idfn.P):
                    if mask[t, p]:
                        fh.write(f"{t + 1},{p + 1},{float(idfn.scores[t, p])!r}\n")
    print(f"scored {len(datasets)} sequence(s)")
    return EXIT_OK


def cmd_profile(args) -> int:
    bundle = load_model(args.model)
    tensors = _tensors(args.data)
    if args.calibration:
        train_t, cal_t = tensors, _tensors(args.calibration)
    else:
        train_t, cal_t = split_calibration(tensors)
    score = lambda xs: [idfn_series(bundle.model, x, bundle.stats, bundle.window) for x in xs]
    profile = build_profile(score(train_t), _stat(args.stat), alpha=args.alpha, calibration=score(cal_t),
                            warmup_seconds=args.warmup, seed=args.seed)
    save_profile(args.out, profile)
    print(f"delta_thr={profile.delta_thr!r} bandwidth={profile.bandwidth!r}")
    return EXIT_OK


def _outcome_doc(name, outcome, tensor, args, profile) -> dict:
    return clean_for_json({
        "dataset_id": name,
        "stop_index": outcome.stop_index,
        "true_change_index": tensor.change_index,
        "dt": tensor.dt,
        "T": tensor.T,
        "statistic": profile.statistic,
        "threshold": outcome.threshold,
        "warmup_samples": outcome.warmup_samples,
        "traces": {
            "deviation": outcome.deviation.values.tolist(),
            "cusum": outcome.cusum.values.tolist(),
            "density": outcome.density_at_current.values.tolist(),
        },
        "config": {"model": str(args.model), "profile": str(args.profile), "data": str(args.data),
                   "stat": profile.statistic, "mode": "online" if args.online else "batch"},
    })


def cmd_detect(args) -> int:
    bundle = load_model(args.model)
    profile = load_profile(args.profile)
    if args.stat and _stat(args.stat) != profile.statistic:
        raise DataError(f"--stat {args.stat} does not match the profile statistic {profile.statistic}")
    datasets = load_dataset(args.data)
    out = Path(args.out)
    multi = len(datasets) > 1
    for name, tensor in datasets:
        if args.online:
            outcome = run_online(bundle.model, bundle.stats, profile, tensor, bundle.window)
        else:
            idfn = idfn_series(bundle.model, tensor, bundle.stats, bundle.window)
            outcome = detect_batch(idfn, profile)
        doc = _outcome_doc(name, outcome, tensor, args, profile)
        write_json(out / f"{name}.json" if multi else out, doc)
    print(f"detected on {len(datasets)} sequence(s)")
    return EXIT_OK


def _load_outcomes(runs_dir) -> list[dict]:
    runs_dir = Path(runs_dir)
    files = [runs_dir] if runs_dir.is_file() else sorted(runs_dir.glob("**/*.json"))
    docs = [_read_json(f) for f in files]
    docs = [d for d in docs if "stop_index" in d and "traces" in d]
    if not docs:
        raise DataError(f"no outcome files found under {runs_dir}")
    return docs


def cmd_eval(args) -> int:
    docs = _load_outcomes(args.runs)
    alphas = _alphas(args.alpha)
    records, scores, labels = [], [], []
    for d in docs:
        tc = d.get("true_change_index")
        records.append(RunRecord(d["dataset_id"], tc is not None, tc, d["stop_index"], d["dt"], d.get("T")))
        if tc is not None:
            s, y = labeled_scores(np.array(d["traces"]["deviation"], dtype=float), tc)
            scores.append(s)
            labels.append(y)
    report = metrics(records, alphas)
    doc = report.to_dict()
    if scores:
        s, y = np.concatenate(scores), np.concatenate(labels)
        if 0 < y.sum() < y.size:
            f1, thr = best_f1(s, y)
            doc["auroc"] = auroc(s, y)
            doc["best_f1"] = {"f1": f1, "threshold": thr, "protocol": "max over thresholds score >= thr"}
            if args.emit_roc:
                emit_roc_csv(args.emit_roc, s, y)
    if args.emit_cdf:
        emit_cdf_csv(args.emit_cdf, report)
    write_json(args.out, clean_for_json(doc))
    print(f"CD={report.CD:.4g} MD={report.MD:.4g} FA={report.FA:.4g} best_delay={report.best_delay}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ws = tuple(int(w) for w in args.windows.split(","))
    rows = chen_window_sweep(ws, args.repeats, args.n_train, args.n_abnormal,
                             tuple(_stat(s) for s in args.stats.split(",")), jobs=args.jobs)
    write_json(args.out, clean_for_json({"rows": rows}))
    for r in rows:
        print(f"w={r['w']} {r['statistic']}: mean={r['mean_delay']} std={r['std_delay']}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    exp = ExperimentConfig.from_dict(doc)
    report = run_experiment(exp, args.jobs)
    write_json(args.out, report)
    for stat, r in report["statistics"].items():
        print(f"{stat}: CD={r['CD']:.4g} MD={r['MD']:.4g} FA={r['FA']:.4g} DD={r['best_delay']}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qcpd", description="Quickest change-point detection for multi-entity sensor data.")
    p.add_argument("--version", action="version", version=f"qcpd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic sequences")
    g.add_argument("kind", choices=sorted(GENERATORS))
    g.add_argument("--config", help="JSON generator settings; may add 'count' and 'normal'")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("ingest", help="convert position trajectories to accelerations")
    i.add_argument("--positions", required=True, help="tensor directory (or its tensor.csv) of x,y,z positions")
    i.add_argument("--sg-window", type=int, default=9)
    i.add_argument("--sg-order", type=int, default=2)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="train the autoencoder on normal data")
    t.add_argument("--data", required=True)
    t.add_argument("--window", type=int, default=50)
    t.add_argument("--hidden", default="128,32")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=512)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--grid-search", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="write per-entity IDfN scores as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    pr = sub.add_parser("profile", help="fit training references and calibrate the threshold")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True, help="normal training data")
    pr.add_argument("--calibration", help="held-out normal data (default: last 10%% of --data)")
    pr.add_argument("--stat", default="mean", help="mean|var|wass")
    pr.add_argument("--alpha", type=float, default=0.05)
    pr.add_argument("--warmup", type=float, default=2.0, help="warmup in seconds")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_profile)

    d = sub.add_parser("detect", help="run the online detector")
    d.add_argument("--model", required=True)
    d.add_argument("--profile", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--stat", help="mean|var|wass; must match the profile")
    d.add_argument("--online", action="store_true", help="score tick by tick instead of in batch")
    d.add_argument("--out", required=True, help="outcome JSON (a directory for multi-sequence data)")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="compute CD/MD/FA and delay statistics")
    e.add_argument("--runs", required=True)
    e.add_argument("--alpha", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    e.add_argument("--out", required=True)
    e.add_argument("--emit-cdf")
    e.add_argument("--emit-roc")
    e.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="window-size sensitivity on Chen data")
    sw.add_argument("--windows", default="5,20,40,50")
    sw.add_argument("--repeats", type=int, default=5)
    sw.add_argument("--n-train", type=int, default=12)
    sw.add_argument("--n-abnormal", type=int, default=10)
    sw.add_argument("--stats", default="mean,wass")
    sw.add_argument("--jobs", type=int, default=default_jobs())
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    x = sub.add_parser("experiment", help="run a declarative gen/train/profile/detect/eval experiment")
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--jobs", type=int, default=None, help="parallel workers (default: QCPD_JOBS or 1)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"qcpd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, QcpdError, IndexError) as exc:
        print(f"qcpd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
