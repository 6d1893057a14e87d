"""Track how far the unlabeled relation matrix sits from the labeled aggregate, round by round.

Prints mean |M - M^u| over rows valid in both, plus the number of valid unlabeled rows.
"""
import argparse

import numpy as np

from fedirm.config import ExperimentConfig, load_config
from fedirm.federation import run_experiment

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.seed = args.seed
    if args.rounds:
        cfg.rounds = args.rounds
    res = run_experiment(cfg, track_relations=True)
    print("round  lambda   val_auc  valid_rows  mean_abs_diff  diag(M)  diag(Mu)")
    for omega, (row, blocks) in enumerate(zip(res.history, res.relation_log)):
        m = blocks["labeled_aggregate"]
        mu = blocks.get("unlabeled")
        if mu is None or not mu.valid.any():
            print(f"{omega:5d}  {row['lambda']:.4f}  {row['auc']:.4f}  {0:10d}")
            continue
        both = m.valid & mu.valid
        diff = blocks["abs_difference"].entries[both]
        print(f"{omega:5d}  {row['lambda']:.4f}  {row['auc']:.4f}  {int(mu.valid.sum()):10d}  "
              f"{np.mean(diff):13.4f}  {np.mean(np.diag(m.entries)[both]):.3f}    "
              f"{np.mean(np.diag(mu.entries)[both]):.3f}")
