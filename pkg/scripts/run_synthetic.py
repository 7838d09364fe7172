"""Train the scan ranker on a synthetic stream and compare it with placement baselines.

    python3 scripts/run_synthetic.py --stream zipf --requests 400 --seeds 0 1 2
    python3 scripts/run_synthetic.py --stream rotating --lr 1e-3
"""

import argparse
import json
import time

import numpy as np

from ecss.datapipe import build_samples, split_dataset
from ecss.evalsim import simulate_policy
from ecss.seqmodel import version_config
from ecss.synthetic import rotating_counts, zipf_counts
from ecss.trainer import TrainConfig, train

POLICIES = ("predicted", "oracle", "persistence", "lfu_cumulative", "random")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--stream", choices=("zipf", "rotating"), default="zipf")
    ap.add_argument("--files", type=int, default=50)
    ap.add_argument("--windows", type=int, default=600)
    ap.add_argument("--requests", type=int, default=400, help="requests per window")
    ap.add_argument("--lookback", type=int, default=20)
    ap.add_argument("--encoder", choices=("mamba", "transformer"), default="mamba")
    ap.add_argument("--version", type=int, default=0)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--normalization", choices=("sample", "row"), default="sample")
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        if args.stream == "zipf":
            cm = zipf_counts(args.files, args.windows, args.requests, seed=seed)
        else:
            cm = rotating_counts(args.files, args.windows, args.requests, seed=seed)
        data = split_dataset(build_samples(cm, args.lookback))
        cfg = version_config(args.encoder, args.version, n_files=args.files, lookback=args.lookback,
                             d_model=args.d_model, normalization=args.normalization)
        start = time.time()
        ckpt, _ = train(data, cfg, TrainConfig(learning_rate=args.lr, max_epochs=args.epochs,
                                               patience=args.patience, seed=seed))
        row = {"seed": seed, "seconds": round(time.time() - start, 1), "best_epoch": ckpt.meta["best_epoch"]}
        for p in POLICIES:
            row[p] = simulate_policy(data, p, args.k, checkpoint=ckpt, seed=seed)[2]
        rows.append(row)
        print(json.dumps(row))
    mean = {p: float(np.mean([r[p] for r in rows])) for p in POLICIES}
    print(json.dumps({"mean": mean,
                      "vs_oracle": mean["predicted"] / mean["oracle"],
                      "vs_persistence": mean["predicted"] / mean["persistence"],
                      "vs_random": mean["predicted"] / mean["random"]}))


if __name__ == "__main__":
    main()
