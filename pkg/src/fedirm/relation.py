"""Class-relation matrices, MC-dropout uncertainty and the relation matching loss."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClientDataset
from .errors import InvalidInputError
from .numerics import LOG_FLOOR, Network, forward, temperature_softmax, temperature_softmax_backward

DEFAULT_TAU = 2.0
DEFAULT_MC_PASSES = 8
DEFAULT_ENTROPY_THRESHOLD = math.log(2.0)


@dataclass
class RelationMatrix:
    """Row c is the temperature-softened soft label of class c.

    Rows for classes that had no (kept) samples are marked invalid and
    hold NaN, so they cannot be mistaken for data.
    """

    entries: np.ndarray  # [C, C]
    valid: np.ndarray  # [C] bool
    provenance: str = "unlabeled-batch"

    @property
    def n_classes(self) -> int:
        return self.entries.shape[0]

    def copy(self) -> RelationMatrix:
        return RelationMatrix(self.entries.copy(), self.valid.copy(), self.provenance)


@dataclass
class UncertaintyReport:
    mean_probs: np.ndarray  # [B, C]
    entropy: np.ndarray  # [B]
    passes: int
    threshold: float
    keep: np.ndarray  # [B] bool


def _class_means(values: np.ndarray, classes: np.ndarray, n_classes: int,
                 include: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class mean rows of `values` plus counts and a one-hot selection matrix."""
    select = np.zeros((values.shape[0], n_classes))
    rows = np.arange(values.shape[0])
    select[rows, classes] = 1.0
    if include is not None:
        select *= include[:, None]
    counts = select.sum(axis=0)
    sums = select.T @ values
    means = np.divide(sums, counts[:, None], out=np.full_like(sums, np.nan), where=counts[:, None] > 0)
    return means, counts, select


def _soften(means: np.ndarray, counts: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    valid = counts > 0
    entries = np.full_like(means, np.nan)
    if valid.any():
        entries[valid] = temperature_softmax(means[valid], tau)
    return entries, valid


def labeled_relation(net: Network, dataset: ClientDataset, tau: float = DEFAULT_TAU,
                     client_id: int | None = None) -> RelationMatrix:
    """Mean eval-mode logits per ground-truth class, softened with temperature."""
    targets = dataset.targets
    logits = forward(net, dataset.features).logits
    means, counts, _ = _class_means(logits, targets, net.n_classes)
    entries, valid = _soften(means, counts, tau)
    cid = dataset.client_id if client_id is None else client_id
    return RelationMatrix(entries, valid, f"labeled-client({cid})")


def mc_dropout_uncertainty(net: Network, batch: np.ndarray, passes: int = DEFAULT_MC_PASSES,
                           seed: int = 0, threshold: float = DEFAULT_ENTROPY_THRESHOLD) -> UncertaintyReport:
    """Predictive entropy of the mean softmax over `passes` dropout forwards."""
    if passes < 2:
        raise InvalidInputError(f"need at least 2 dropout passes, got {passes}")
    if not net.dropout_rate > 0:
        raise InvalidInputError("MC-dropout uncertainty needs a positive dropout rate")
    seeds = np.random.SeedSequence([seed, 0x4D43]).generate_state(passes)
    total = None
    for s in seeds:
        p = forward(net, batch, seed=int(s)).probs
        total = p if total is None else total + p
    mean = total / passes
    entropy = -(mean * np.log(np.maximum(mean, LOG_FLOOR))).sum(axis=1)
    entropy = np.maximum(entropy, 0.0)
    return UncertaintyReport(mean, entropy, passes, threshold, entropy < threshold)


def pseudo_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index.
    return np.argmax(probs, axis=1)


@dataclass
class _UnlabeledRelationCache:
    select: np.ndarray
    counts: np.ndarray
    tau: float


def unlabeled_relation(probs: np.ndarray, report: UncertaintyReport, tau: float = DEFAULT_TAU,
                       values: np.ndarray | None = None) -> RelationMatrix:
    """Relation matrix from confidently pseudo-labelled samples of one batch.

    Pseudo labels are argmax(probs); per-class means are taken over
    `values` (default: the probabilities themselves) for kept samples.
    """
    matrix, _ = unlabeled_relation_with_cache(probs, report, tau, values)
    return matrix


def unlabeled_relation_with_cache(probs, report, tau=DEFAULT_TAU, values=None):
    probs = np.asarray(probs, dtype=np.float64)
    if report.keep.shape[0] != probs.shape[0]:
        raise InvalidInputError("uncertainty report and probabilities disagree on batch size")
    values = probs if values is None else values
    means, counts, select = _class_means(values, pseudo_labels(probs), probs.shape[1], report.keep)
    entries, valid = _soften(means, counts, tau)
    return RelationMatrix(entries, valid, "unlabeled-batch"), _UnlabeledRelationCache(select, counts, tau)


def unlabeled_relation_backward(matrix: RelationMatrix, cache: _UnlabeledRelationCache,
                                grad_entries: np.ndarray) -> np.ndarray:
    """Gradient of a loss on the relation entries w.r.t. the averaged values [B, C]."""
    valid = matrix.valid
    grad_means = np.zeros_like(grad_entries)
    if valid.any():
        grad_means[valid] = temperature_softmax_backward(matrix.entries[valid], grad_entries[valid], cache.tau)
        grad_means[valid] /= cache.counts[valid, None]
    return cache.select @ grad_means


def _kl_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * (np.log(np.maximum(a, LOG_FLOOR)) - np.log(np.maximum(b, LOG_FLOOR)))).sum(axis=1)


def irm_loss_and_grad(target: RelationMatrix, local: RelationMatrix) -> tuple[float, np.ndarray]:
    """Symmetric KL between matching valid rows, averaged over those rows.

    Returns the loss and its gradient w.r.t. ``local.entries`` (the server
    aggregate `target` is treated as a constant).
    """
    if target.n_classes != local.n_classes:
        raise InvalidInputError(f"class count mismatch: {target.n_classes} vs {local.n_classes}")
    grad = np.zeros_like(local.entries)
    both = target.valid & local.valid
    n = int(both.sum())
    if n == 0:
        return 0.0, grad
    a = target.entries[both]
    b = local.entries[both]
    loss = float((_kl_rows(a, b) + _kl_rows(b, a)).sum() / n)
    above = b > LOG_FLOOR
    # d/db [a log a/b]  = -a/b           (zero where b sits on the floor)
    # d/db [b log b/a]  = log b' + 1 - log a'   (with floored logs)
    d_ab = np.where(above, -a / np.where(above, b, 1.0), 0.0)
    d_ba = (np.log(np.maximum(b, LOG_FLOOR)) - np.log(np.maximum(a, LOG_FLOOR))) + np.where(above, 1.0, 0.0)
    grad[both] = (d_ab + d_ba) / n
    return loss, grad


def irm_loss(target: RelationMatrix, local: RelationMatrix) -> float:
    return irm_loss_and_grad(target, local)[0]


def aggregate_relations(matrices: list[RelationMatrix]) -> RelationMatrix:
    """Entrywise mean over the matrices where each row is valid, rows renormalized."""
    if not matrices:
        raise InvalidInputError("cannot aggregate an empty list of relation matrices")
    n_classes = matrices[0].n_classes
    for m in matrices:
        if m.n_classes != n_classes:
            raise InvalidInputError("relation matrices disagree on class count")
        if not m.provenance.startswith("labeled-client"):
            raise InvalidInputError(f"only labeled-client matrices are aggregated, got {m.provenance}")
    stack = np.stack([np.where(m.valid[:, None], m.entries, 0.0) for m in matrices])
    counts = np.stack([m.valid for m in matrices]).sum(axis=0)
    valid = counts > 0
    entries = np.full((n_classes, n_classes), np.nan)
    if valid.any():
        rows = stack.sum(axis=0)[valid] / counts[valid, None]
        entries[valid] = rows / rows.sum(axis=1, keepdims=True)
    return RelationMatrix(entries, valid, "server-aggregate")


def write_relation_csv(path: str | Path, blocks: dict[str, RelationMatrix]) -> None:
    """One row per (matrix, class): entries to 6 decimals plus a validity flag."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = next(iter(blocks.values()))
        writer.writerow(["matrix", "class"] + [f"e{j}" for j in range(first.n_classes)] + ["valid"])
        for name, m in blocks.items():
            for c in range(m.n_classes):
                cells = ["nan" if not m.valid[c] else f"{v:.6f}" for v in m.entries[c]]
                writer.writerow([name, c, *cells, int(bool(m.valid[c]))])


def relation_difference(a: RelationMatrix, b: RelationMatrix) -> RelationMatrix:
    valid = a.valid & b.valid
    entries = np.where(valid[:, None], np.abs(a.entries - b.entries), np.nan)
    return RelationMatrix(entries, valid, "difference")
