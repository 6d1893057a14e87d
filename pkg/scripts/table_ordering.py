"""Compare training modes on one task: mean and std of test AUC / accuracy over seeds.

    python3 scripts/table_ordering.py --config configs/acceptance.ini --seeds 0,1,2
"""
import argparse
import time

import numpy as np

from fedirm.config import ExperimentConfig, load_config
from fedirm.federation import run_experiment

MODES = ("fedavg_all_labeled", "fedavg_labeled_only", "fed_consistency", "fedirm")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--modes", default=",".join(MODES))
    ap.add_argument("--rounds", type=int)
    args = ap.parse_args()

    base = load_config(args.config) if args.config else ExperimentConfig()
    if args.rounds:
        base.rounds = args.rounds
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"{'mode':22s} {'clients':>8s} {'auc':>16s} {'accuracy':>16s} {'time':>6s}")
    for mode in args.modes.split(","):
        t0 = time.perf_counter()
        aucs, accs = [], []
        for seed in seeds:
            cfg = base.resolved()
            cfg.mode, cfg.seed = mode, seed
            cfg = cfg.resolved()
            test = run_experiment(cfg).test
            aucs.append(test.auc)
            accs.append(test.accuracy)
        clients = f"{cfg.effective_labeled}/{cfg.effective_unlabeled}"
        print(f"{mode:22s} {clients:>8s} {np.mean(aucs):.4f} ± {np.std(aucs):.4f} "
              f"{np.mean(accs):.4f} ± {np.std(accs):.4f} {time.perf_counter() - t0:5.1f}s")


if __name__ == "__main__":
    main()
