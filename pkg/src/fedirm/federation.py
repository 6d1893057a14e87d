"""Server side: FedAvg, relation broadcast, the round loop and whole experiments."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import relation as rel
from .config import ExperimentConfig, config_to_text
from .data import ClientDataset, Dataset, FederationSplit, generate_blobs, load_idx, partition
from .errors import InvalidInputError
from .metrics import METRIC_NAMES, EvalResult, evaluate
from .numerics import Network, ParameterSet, build_network, forward, save_checkpoint
from .training import labeled_local_update, unlabeled_local_update, warmup

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("round", "split", *METRIC_NAMES, "lambda")


@dataclass
class ClientUpdate:
    client_id: int
    params: ParameterSet
    n_samples: int
    relation: rel.RelationMatrix | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidInputError(f"client {self.client_id}: sample count must be >= 1")


@dataclass
class RoundBroadcast:
    round: int
    params: ParameterSet
    relation: rel.RelationMatrix | None


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, cause: Exception):
        self.client_id = client_id
        super().__init__(f"client {client_id} failed: {cause}")


def fedavg(updates: list[ClientUpdate]) -> ParameterSet:
    """Sample-count weighted mean, summed in ascending client-id order."""
    if not updates:
        raise InvalidInputError("fedavg needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0].params
    for u in ordered[1:]:
        if u.params.shape_signature != ref.shape_signature:
            raise InvalidInputError(
                f"client {u.client_id}: shape signature {u.params.shape_signature} != {ref.shape_signature}"
            )
    total = float(sum(u.n_samples for u in ordered))
    layers = []
    for k in range(len(ref.layers)):
        w = np.zeros_like(ref.layers[k][0])
        b = np.zeros_like(ref.layers[k][1])
        for u in ordered:
            weight = u.n_samples / total
            w += weight * u.params.layers[k][0]
            b += weight * u.params.layers[k][1]
        layers.append((w, b))
    return ParameterSet(layers)


def client_seed(root: int, round_idx: int, client_id: int) -> int:
    """Seed tree: independent of the order clients are processed in."""
    return int(np.random.SeedSequence([root, round_idx, client_id]).generate_state(1, np.uint64)[0])


@dataclass
class ExperimentState:
    net: Network  # holds the current global parameters
    round: int = 0
    root_seed: int = 0
    relation: rel.RelationMatrix | None = None
    history: list[dict] = field(default_factory=list)
    relation_log: list[dict[str, rel.RelationMatrix]] = field(default_factory=list)
    best_auc: float = -np.inf
    best_round: int = -1
    best_params: ParameterSet | None = None

    @property
    def params(self) -> ParameterSet:
        return self.net.params


def _participants(split: FederationSplit, mode: str) -> list[ClientDataset]:
    if mode == "fedavg_labeled_only":
        return list(split.labeled)
    return split.clients


def sample_unlabeled_relation(net: Network, client: ClientDataset, cfg, seed: int) -> rel.RelationMatrix:
    x = client.features
    report = rel.mc_dropout_uncertainty(net, x, cfg.local.mc_passes, seed, cfg.local.entropy_threshold)
    fwd = forward(net, x)
    values = fwd.logits if cfg.local.unlabeled_uses_logits else fwd.probs
    return rel.unlabeled_relation(fwd.probs, report, cfg.local.tau, values)


def run_round(state: ExperimentState, split: FederationSplit, cfg: ExperimentConfig,
              track_relations: bool = False) -> ExperimentState:
    """One synchronous round: broadcast, local updates, FedAvg, relation aggregation, validation."""
    omega = state.round
    local = cfg.local
    broadcast = RoundBroadcast(omega, state.params, state.relation)
    lam = warmup(omega, local.warmup_horizon, local.warmup_squared)
    target = broadcast.relation if cfg.mode == "fedirm" else None
    global_net = state.net.with_params(broadcast.params)

    updates: list[ClientUpdate] = []
    sampled_unlabeled = None
    for client in _participants(split, cfg.mode):
        seed = client_seed(state.root_seed, omega, client.client_id)
        try:
            if client.labeled:
                params = labeled_local_update(global_net, client, local, seed)
                relation = rel.labeled_relation(global_net.with_params(params), client, local.tau)
            else:
                params = unlabeled_local_update(global_net, client, target, lam, local, seed)
                relation = None
                if track_relations and sampled_unlabeled is None:
                    sampled_unlabeled = sample_unlabeled_relation(global_net.with_params(params), client, cfg, seed)
        except Exception as exc:
            raise ClientFailure(client.client_id, exc) from exc
        updates.append(ClientUpdate(client.client_id, params, client.n_samples, relation))

    new_params = fedavg(updates)
    labeled_relations = [u.relation for u in updates if u.relation is not None]
    new_relation = rel.aggregate_relations(labeled_relations) if labeled_relations else state.relation
    new_net = state.net.with_params(new_params)

    val = evaluate(new_net, split.validation.features, split.validation.labels)
    row = {"round": omega, "split": "val", **val.row(), "lambda": lam}
    new_state = dataclasses.replace(
        state,
        net=new_net,
        round=omega + 1,
        relation=new_relation,
        history=[*state.history, row],
    )
    if track_relations and new_relation is not None:
        blocks = {"labeled_aggregate": new_relation}
        if sampled_unlabeled is not None:
            blocks["unlabeled"] = sampled_unlabeled
            blocks["abs_difference"] = rel.relation_difference(new_relation, sampled_unlabeled)
        new_state.relation_log = [*state.relation_log, blocks]
    if val.auc > state.best_auc:
        new_state.best_auc = val.auc
        new_state.best_round = omega
        new_state.best_params = new_params.copy()
    return new_state


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "blobs":
        return generate_blobs(d.n_classes, d.per_class, d.dim, d.spread, cfg.data_seed, d.separation)
    return load_idx(d.images, d.labels, d.standardize, d.n_classes)


def build_split(cfg: ExperimentConfig, dataset: Dataset | None = None) -> FederationSplit:
    dataset = build_dataset(cfg) if dataset is None else dataset
    seed = int(np.random.SeedSequence([cfg.data_seed, 1]).generate_state(1)[0])
    return partition(dataset, cfg.clients, cfg.effective_labeled, seed, cfg.effective_unlabeled)


def initial_state(cfg: ExperimentConfig, input_dim: int, n_classes: int) -> ExperimentState:
    init_seed = int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    net = build_network(input_dim, n_classes, cfg.model.hidden, cfg.model.activation, cfg.model.dropout, init_seed)
    return ExperimentState(net=net, root_seed=cfg.seed)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    history: list[dict]
    test: EvalResult
    test_row: dict
    final_params: ParameterSet
    best_params: ParameterSet
    best_round: int
    relation_log: list[dict[str, rel.RelationMatrix]]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in [*self.history, self.test_row]:
            writer.writerow([_cell(row[c]) for c in METRICS_COLUMNS])
        return buf.getvalue()


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.8f}"
    return str(value)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   split: FederationSplit | None = None, track_relations: bool | None = None) -> ExperimentResult:
    """Build data, run all rounds, pick the best round on validation AUC, test it."""
    cfg = cfg.resolved()
    if track_relations is None:
        track_relations = out_dir is not None
    split = build_split(cfg) if split is None else split
    n_classes = split.validation.n_classes
    state = initial_state(cfg, split.train.features.shape[1], n_classes)
    for _ in range(cfg.rounds):
        state = run_round(state, split, cfg, track_relations)
        log.debug("round %d: %s", state.round - 1, state.history[-1])
    best = state.best_params if state.best_params is not None else state.params
    test = evaluate(state.net.with_params(best), split.test.features, split.test.labels)
    best_lambda = state.history[state.best_round]["lambda"] if state.best_round >= 0 else 0.0
    test_row = {"round": state.best_round, "split": "test", **test.row(), "lambda": best_lambda}
    result = ExperimentResult(cfg, state.history, test, test_row, state.params, best, state.best_round,
                              state.relation_log)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def write_outputs(result: ExperimentResult, out: Path) -> None:
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "relations").mkdir(exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics_csv())
    (out / "config.resolved").write_text(config_to_text(result.config))
    (out / "test_report.txt").write_text(f"best round: {result.best_round}\n{result.test.report()}\n")
    save_checkpoint(result.final_params, out / "checkpoints" / "final.bin")
    save_checkpoint(result.best_params, out / "checkpoints" / "best.bin")
    for omega, blocks in enumerate(result.relation_log):
        rel.write_relation_csv(out / "relations" / f"round_{omega}.csv", blocks)
