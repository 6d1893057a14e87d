"""Command-line entry point: run, sweep, gradcheck, dump-relations."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck
from . import relation as rel
from .config import MODES, ExperimentConfig, config_to_text, load_config
from .data import FederationSplit
from .errors import ConfigError, FormatError, InvalidInputError, NumericalFailure, UndefinedMetricError
from .federation import ClientFailure, build_split, client_seed, run_experiment, sample_unlabeled_relation
from .numerics import build_network, load_checkpoint

SWEEP_MODES = ("fedirm", "fed_consistency", "fedavg_labeled_only")
SWEEP_AXES = {"m": (1, 2, 3, 4), "n": (1, 2, 4, 8)}
SWEEP_COLUMNS = ("axis", "value", "mode", "seeds_ok", "seeds_failed",
                 "auc_mean", "auc_std", "accuracy_mean", "accuracy_std", "errors")

_EXPECTED = (ConfigError, FormatError, InvalidInputError, NumericalFailure, UndefinedMetricError,
             ClientFailure, OSError)


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()).replace('"', "'")
    return f'fedirm: error kind={type(exc).__name__} message="{msg}"'


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "rounds", None) is not None:
        cfg.rounds = args.rounds
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg.resolved()


# --- run ----------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load(args)
    if args.print_config:
        print(config_to_text(cfg), end="")
        return 0
    res = run_experiment(cfg, cfg.out_dir)
    t = res.test
    print(f"mode={cfg.mode} seed={cfg.seed} best_round={res.best_round} "
          f"test_auc={t.auc:.4f} test_accuracy={t.accuracy:.4f} out={cfg.out_dir}")
    return 0


# --- sweep --------------------------------------------------------------------------

def _cell_config(base: ExperimentConfig, axis: str, value: int, mode: str, seed: int) -> ExperimentConfig:
    cfg = dataclasses.replace(base, mode=mode, seed=seed)
    if axis == "m":
        cfg.labeled, cfg.unlabeled = value, None
    else:
        cfg.unlabeled = value
    cfg.out_dir = str(Path(base.out_dir) / f"{axis}={value}" / mode / f"seed={seed}")
    return cfg


def _run_cell(cfg: ExperimentConfig) -> tuple[float, float]:
    res = run_experiment(cfg, cfg.out_dir)
    return res.test.auc, res.test.accuracy


def _safe_cell(cfg: ExperimentConfig):
    try:
        return _run_cell(cfg)
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return exc


def sweep_workers(n_jobs: int) -> int:
    cap = os.environ.get("FEDIRM_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def _std(values: list[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run_sweep(base: ExperimentConfig, axis: str, values, seeds, modes=SWEEP_MODES) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise InvalidInputError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    for v in values:
        probe = _cell_config(base, axis, v, modes[0], seeds[0])
        try:
            probe.validate()
        except ConfigError as exc:
            raise InvalidInputError(f"axis value {axis}={v} invalid for K={base.clients}: {exc}") from None
    cells = [(v, mode) for v in values for mode in modes]
    jobs = [_cell_config(base, axis, v, mode, s) for v, mode in cells for s in seeds]
    workers = sweep_workers(len(jobs))
    if workers == 1:
        outcomes = [_safe_cell(cfg) for cfg in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_safe_cell, jobs))

    rows = []
    for i, (v, mode) in enumerate(cells):
        chunk = outcomes[i * len(seeds):(i + 1) * len(seeds)]
        ok = [o for o in chunk if not isinstance(o, Exception)]
        errors = [f"seed={s}: {_error_line(o)}" for s, o in zip(seeds, chunk) if isinstance(o, Exception)]
        aucs, accs = [o[0] for o in ok], [o[1] for o in ok]
        rows.append({
            "axis": axis, "value": v, "mode": mode,
            "seeds_ok": len(ok), "seeds_failed": len(errors),
            "auc_mean": float(np.mean(aucs)) if ok else float("nan"), "auc_std": _std(aucs),
            "accuracy_mean": float(np.mean(accs)) if ok else float("nan"), "accuracy_std": _std(accs),
            "errors": " | ".join(errors),
        })
    return rows


def write_sweep(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in SWEEP_COLUMNS])


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    base = _load(args)
    values = _int_list(args.values) if args.values else list(SWEEP_AXES[args.axis])
    modes = tuple(args.modes.split(",")) if args.modes else SWEEP_MODES
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    rows = run_sweep(base, args.axis, values, _int_list(args.seeds), modes)
    write_sweep(rows, Path(base.out_dir) / "sweep.csv")
    for row in rows:
        print(f"{args.axis}={row['value']:<2} {row['mode']:20s} auc {row['auc_mean']:.4f} ± {row['auc_std']:.4f}  "
              f"acc {row['accuracy_mean']:.4f} ± {row['accuracy_std']:.4f}  failed={row['seeds_failed']}")
    return 1 if any(r["seeds_ok"] == 0 for r in rows) else 0


# --- gradcheck ----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(seed=args.seed or 0, trials=args.trials)
    for line in report.lines():
        print(line)
    if not report.ok:
        bad = ",".join(report.failures())
        print(f"fedirm: error kind=GradientMismatch loss={bad} tolerance={report.tolerance:g}", file=sys.stderr)
        return 1
    return 0


# --- dump-relations -----------------------------------------------------------------

def relation_blocks(cfg: ExperimentConfig, params, split: FederationSplit | None = None) -> dict[str, rel.RelationMatrix]:
    split = build_split(cfg) if split is None else split
    n_classes = split.validation.n_classes
    net = build_network(split.train.features.shape[1], n_classes, cfg.model.hidden, cfg.model.activation,
                        cfg.model.dropout).with_params(params)
    target = rel.aggregate_relations([rel.labeled_relation(net, c, cfg.local.tau) for c in split.labeled])
    blocks = {"labeled_aggregate": target}
    if split.unlabeled:
        client = split.unlabeled[0]
        local = sample_unlabeled_relation(net, client, cfg, client_seed(cfg.seed, 0, client.client_id))
        blocks["unlabeled"] = local
        blocks["abs_difference"] = rel.relation_difference(target, local)
    return blocks


def cmd_dump_relations(args) -> int:
    cfg = _load(args)
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "relations" / "checkpoint.csv"
    if out.suffix != ".csv":
        out = out / "relations.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rel.write_relation_csv(out, relation_blocks(cfg, params))
    print(f"wrote {out}")
    return 0


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedirm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--mode", choices=MODES, help="override experiment.mode")
        p.add_argument("--rounds", type=int, help="override experiment.rounds")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="client-count sweep over modes and seeds")
    common(p)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", help="comma-separated axis values (default: m 1..4, n 1,2,4,8)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--modes", help="comma-separated modes (default: fedirm,fed_consistency,fedavg_labeled_only)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-relations", help="write M, M^u and |M - M^u| for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_dump_relations)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except _EXPECTED as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
