"""Full pipeline on a MovieLens ratings file: prepare, train, evaluate, baselines.

    python3 scripts/run_movielens.py data/ml-32m/ratings.csv --workdir runs/ml --model mamba --version 0

Each step goes through the ``ecss`` command line so the run leaves the same
artifacts and manifests as a manual session.
"""

import argparse
import sys
from pathlib import Path

from ecss import cli


def step(argv):
    print("$ ecss " + " ".join(argv), flush=True)
    code = cli.main(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("ratings")
    ap.add_argument("--workdir", default="runs/movielens")
    ap.add_argument("--model", choices=("mamba", "transformer"), default="mamba")
    ap.add_argument("--version", type=int, default=0)
    ap.add_argument("--lookback", type=int, default=200)
    ap.add_argument("--top-n-files", type=int, default=149)
    ap.add_argument("--window-seconds", type=int, default=86_400)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--k", type=int, default=10)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / f"dataset_L{args.lookback}.bin"
    ckpt = work / f"{args.model}_v{args.version}_L{args.lookback}.ckpt"
    if not data.exists():
        step(["prepare", "--ratings", args.ratings, "--top-n-files", str(args.top_n_files),
              "--window-seconds", str(args.window_seconds), "--lookback", str(args.lookback), "--out", str(data)])
    step(["train", "--dataset", str(data), "--model", args.model, "--version", str(args.version),
          "--seed", str(args.seed), "--epochs", str(args.epochs), "--verbose", "--out", str(ckpt)])
    step(["evaluate", "--ckpt", str(ckpt), "--dataset", str(data), "--k", str(args.k),
          "--out", str(ckpt) + ".metrics.json", "--csv", str(ckpt) + ".metrics.csv"])
    for policy in ("oracle", "persistence", "lfu_cumulative", "random"):
        step(["simulate", "--dataset", str(data), "--policy", policy, "--k", str(args.k),
              "--out", str(work / f"hits_{policy}.csv")])


if __name__ == "__main__":
    main()
