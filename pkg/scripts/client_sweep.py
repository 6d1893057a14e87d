"""Labeled- or unlabeled-client count sweep, written to <out>/sweep.csv.

    python3 scripts/client_sweep.py --config configs/acceptance.ini --axis n --out runs/sweep_n
"""
import argparse
import sys

from fedirm import cli

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/acceptance.ini")
    ap.add_argument("--axis", choices=("m", "n"), default="n")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    sys.exit(cli.main(["sweep", "--config", args.config, "--axis", args.axis,
                       "--seeds", args.seeds, "--out", args.out]))
