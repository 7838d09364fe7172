"""Command-line entry point: ``ecss {prepare,train,evaluate,params,flops,simulate}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .datapipe import (CatalogFilter, DataError, build_samples, discretize, filter_catalog, load_dataset,
                       parse_request_log, save_dataset, split_dataset)
from .evalsim import POLICIES, evaluate, estimate_flops, simulate_policy
from .seqmodel import MODEL_VERSIONS, count_parameters, version_config
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ecss")


class CliError(Exception):
    pass


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    atomic_write_text(Path(str(out) + ".manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions")
    return parts


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _require_file(path: Path, what: str) -> None:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")


# ------------------------------------------------------------------ commands


def cmd_prepare(args) -> int:
    started = time.time()
    ratings = Path(args.ratings)
    _require_file(ratings, "ratings file")
    flt = CatalogFilter(args.min_requests, args.min_span_days, args.top_n_files)
    events, _ = parse_request_log(ratings)
    kept, _ = filter_catalog(events, flt)
    cm = discretize(kept, args.window_seconds)
    split = split_dataset(build_samples(cm, args.lookback), args.split)
    meta = {
        "n_windows": cm.n_windows,
        "window_seconds": cm.window_seconds,
        "epoch_origin": cm.epoch_origin,
        "min_requests": flt.min_requests,
        "min_span_days": flt.min_span_days,
        "top_n_files": flt.top_n_files if flt.top_n_files is not None else "none",
        "split": ",".join(repr(f) for f in args.split),
    }
    save_dataset(split, args.out, meta)
    m = len(split.all_samples())
    print(f"N_c={cm.n_files} N_w={cm.n_windows} M={m} "
          f"train={len(split.train)} validation={len(split.validation)} test={len(split.test)}")
    config = dict(vars(args), split=list(args.split))
    config.pop("func", None)
    write_manifest(Path(args.out), "prepare", config, None, {"ratings": ratings},
                   {"dataset": args.out}, started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    _require_file(Path(args.dataset), "dataset")
    ds = load_dataset(args.dataset)
    overrides = {"normalization": args.normalization}
    if args.d_model is not None:
        overrides["d_model"] = args.d_model
    cfg = version_config(args.model, args.version, n_files=ds.n_files, lookback=ds.lookback, **overrides)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs,
                       patience=args.patience, seed=args.seed)
    ckpt, lines = train(ds, cfg, tcfg, on_epoch=print if args.verbose else None)
    ckpt.meta["version"] = args.version
    save_checkpoint(ckpt, args.out)
    atomic_write_text(Path(str(args.out) + ".log"), "\n".join(lines) + "\n")
    print(f"trained {args.model} v{args.version}: epochs={ckpt.meta['epochs_run']} "
          f"best_epoch={ckpt.meta['best_epoch']} best_val_loss={ckpt.meta['best_val_loss']:.6g}")
    config = {"model": cfg.to_dict(), "train": asdict(tcfg)}
    write_manifest(Path(args.out), "train", config, args.seed, {"dataset": args.dataset},
                   {"checkpoint": args.out, "log": str(args.out) + ".log"}, started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    _require_file(Path(args.ckpt), "checkpoint")
    _require_file(Path(args.dataset), "dataset")
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.dataset)
    report = evaluate(ckpt, ds.test, args.k)
    atomic_write_text(args.out, json.dumps(report.to_dict(), sort_keys=True) + "\n")
    print(f"map_at_k={report.map_at_k:.4f} ndcg_at_k={report.ndcg_at_k:.4f} "
          f"cache_hit_rate={report.cache_hit_rate:.4f} (k={report.k}, n={report.n_samples})")
    outputs = {"metrics": args.out}
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "model", "version", "metric", "value"])
        version = ckpt.meta.get("version", "custom")
        for metric in ("map_at_k", "ndcg_at_k", "cache_hit_rate"):
            w.writerow([ckpt.config.lookback, ckpt.config.encoder, version, metric, repr(getattr(report, metric))])
        atomic_write_text(args.csv, buf.getvalue())
        outputs["csv"] = args.csv
    write_manifest(Path(args.out), "evaluate", {"k": args.k}, None,
                   {"checkpoint": args.ckpt, "dataset": args.dataset}, outputs, started)
    return 0


def cmd_params(args) -> int:
    cfg = version_config(args.model, args.version, n_files=args.n_files)
    total, breakdown = count_parameters(cfg)
    for name, n in breakdown.items():
        print(f"{name:<16} {n:>10}")
    print(f"{'total':<16} {total:>10}")
    return 0


def cmd_flops(args) -> int:
    cfg = version_config(args.model, args.version, n_files=args.n_files, lookback=args.lookback)
    if args.sweep:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "model", "version", "flops"])
        for L in args.sweep:
            w.writerow([L, args.model, args.version, estimate_flops(cfg, L).total])
        if args.out:
            atomic_write_text(args.out, buf.getvalue())
        sys.stdout.write(buf.getvalue())
        return 0
    report = estimate_flops(cfg, args.lookback)
    for name, n in report.components.items():
        print(f"{name:<24} {n:>16}")
    print(f"{'total':<24} {report.total:>16}")
    return 0


def cmd_simulate(args) -> int:
    started = time.time()
    _require_file(Path(args.dataset), "dataset")
    ckpt = None
    if args.policy == "predicted":
        if not args.ckpt:
            raise CliError("--policy predicted requires --ckpt")
        _require_file(Path(args.ckpt), "checkpoint")
        ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.dataset)
    t_u, rates, mean = simulate_policy(ds, args.policy, args.k, checkpoint=ckpt, seed=args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_u", "hit_rate"])
    for t, r in zip(t_u.tolist(), rates.tolist()):
        w.writerow([t, repr(r)])
    atomic_write_text(args.out, buf.getvalue())
    print(f"policy={args.policy} k={args.k} mean_hit_rate={mean:.6f}")
    inputs = {"dataset": args.dataset}
    if args.ckpt:
        inputs["checkpoint"] = args.ckpt
    write_manifest(Path(args.out), "simulate", {"policy": args.policy, "k": args.k}, args.seed,
                   inputs, {"hits": args.out}, started)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecss", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ecss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ratings log -> windowed dataset")
    p.add_argument("--ratings", required=True)
    p.add_argument("--window-seconds", type=int, default=86_400)
    p.add_argument("--min-requests", type=int, default=20)
    p.add_argument("--min-span-days", type=float, default=200)
    p.add_argument("--top-n-files", type=int, default=None)
    p.add_argument("--lookback", type=int, required=True)
    p.add_argument("--split", type=_fractions, default=(0.7, 0.1, 0.2))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a ranker on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=sorted(MODEL_VERSIONS), required=True)
    p.add_argument("--version", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--d-model", type=int, default=None, help="override the preset width")
    p.add_argument("--normalization", choices=("sample", "row"), default="sample")
    p.add_argument("--verbose", action="store_true", help="print the epoch log as it runs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MAP@K, NDCG@K and cache-hit rate on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write L,model,version,metric,value rows")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="parameter count breakdown")
    p.add_argument("--model", choices=sorted(MODEL_VERSIONS), required=True)
    p.add_argument("--version", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--n-files", type=int, default=149)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="analytic forward-pass FLOPs")
    p.add_argument("--model", choices=sorted(MODEL_VERSIONS), required=True)
    p.add_argument("--version", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--lookback", type=int, default=200)
    p.add_argument("--n-files", type=int, default=149)
    p.add_argument("--sweep", type=_int_list, default=None)
    p.add_argument("--out", default=None, help="write the sweep CSV here as well")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("simulate", help="per-window hit rates of a placement policy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def _thread_limit():
    n = os.environ.get("ECSS_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (CliError, DataError, CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
