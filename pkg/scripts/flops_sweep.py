"""FLOPs of both encoders across look-back lengths, as CSV.

    python3 scripts/flops_sweep.py --lookbacks 100 200 500 1000 2000 > flops.csv
"""

import argparse
import csv
import sys

from ecss.evalsim import estimate_flops
from ecss.seqmodel import version_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lookbacks", type=int, nargs="+", default=[100, 200, 500, 1000, 1500, 2000])
    ap.add_argument("--n-files", type=int, default=149)
    ap.add_argument("--versions", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["L", "model", "version", "flops", "ratio_to_first"])
    for model in ("mamba", "transformer"):
        for v in args.versions:
            cfg = version_config(model, v, n_files=args.n_files)
            base = None
            for L in args.lookbacks:
                total = estimate_flops(cfg, L).total
                base = base or total
                w.writerow([L, model, v, total, f"{total / base:.3f}"])


if __name__ == "__main__":
    main()
