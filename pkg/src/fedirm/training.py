"""Local client objectives and updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import relation as rel
from .data import ClientDataset, perturb_batch
from .errors import InvalidInputError
from .numerics import (
    LOG_FLOOR,
    AdamState,
    Network,
    ParameterSet,
    adam_step,
    backward,
    check_finite,
    forward,
)


@dataclass
class LocalConfig:
    batch_size: int = 16
    local_epochs: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    noise_sigma: float = 0.1
    tau: float = rel.DEFAULT_TAU
    mc_passes: int = rel.DEFAULT_MC_PASSES
    entropy_threshold: float = rel.DEFAULT_ENTROPY_THRESHOLD
    warmup_horizon: int = 30
    warmup_squared: bool = True
    irm_weight: float = 1.0
    unlabeled_uses_logits: bool = False

    def validate(self) -> None:
        if self.batch_size < 1 or self.local_epochs < 1 or self.warmup_horizon < 1:
            raise InvalidInputError("batch_size, local_epochs and warmup_horizon must be >= 1")
        if self.lr < 0 or self.tau <= 0 or self.mc_passes < 2 or self.noise_sigma < 0:
            raise InvalidInputError("need lr >= 0, tau > 0, mc_passes >= 2, noise_sigma >= 0")


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return cross_entropy_and_grad(probs, targets)[0]


def cross_entropy_and_grad(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of -log p[i, y_i] (log floored) and its gradient w.r.t. probs."""
    targets = np.asarray(targets)
    b, c = probs.shape
    if targets.shape != (b,) or targets.min() < 0 or targets.max() >= c:
        raise InvalidInputError(f"targets must be {b} class indices in [0, {c})")
    rows = np.arange(b)
    picked = probs[rows, targets]
    loss = float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())
    grad = np.zeros_like(probs)
    grad[rows, targets] = np.where(picked > LOG_FLOOR, -1.0 / (b * np.maximum(picked, LOG_FLOOR)), 0.0)
    return loss, grad


def consistency_loss(p1: np.ndarray, p2: np.ndarray) -> float:
    return consistency_loss_and_grad(p1, p2)[0]


def consistency_loss_and_grad(p1: np.ndarray, p2: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared difference over batch and classes; gradients for both branches."""
    if p1.shape != p2.shape:
        raise InvalidInputError(f"shape mismatch {p1.shape} vs {p2.shape}")
    diff = p1 - p2
    g = 2.0 * diff / diff.size
    return float((diff * diff).mean()), g, -g


def warmup(round_idx: int, horizon: int = 30, squared: bool = True) -> float:
    """Gaussian ramp exp(-5 (1 - w/W)^2), clamped to 1 from round `horizon` on."""
    if round_idx < 0 or horizon < 1:
        raise InvalidInputError("need round >= 0 and horizon >= 1")
    gap = 1.0 - min(round_idx / horizon, 1.0)
    return math.exp(-5.0 * (gap * gap if squared else gap))


def batch_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def labeled_objective(net: Network, x: np.ndarray, y: np.ndarray, seed: int) -> tuple[float, ParameterSet]:
    fwd = forward(net, x, seed=seed)
    loss, grad = cross_entropy_and_grad(fwd.probs, y)
    check_finite(loss, "cross_entropy")
    return loss, backward(net, fwd, grad_probs=grad)


@dataclass
class UnlabeledStep:
    loss: float
    consistency: float
    irm: float
    grads: ParameterSet
    relation: rel.RelationMatrix
    kept: int


def unlabeled_objective(net: Network, x: np.ndarray, target: rel.RelationMatrix | None, lam: float,
                        cfg: LocalConfig, seed: int,
                        image_shape: tuple[int, int] | None = None,
                        consistency_weight: float = 1.0) -> UnlabeledStep:
    """lam * (consistency + irm_weight * IRM) on one unlabeled batch, with gradients.

    All randomness (two perturbations, two dropout masks, the MC passes)
    comes from `seed`, so the value is a deterministic function of the
    parameters and can be finite-differenced.
    """
    s_xi, s_xi2, s_drop, s_drop2, s_mc = batch_seeds(seed, 5)
    x1 = perturb_batch(x, s_xi, cfg.noise_sigma, image_shape)
    x2 = perturb_batch(x, s_xi2, cfg.noise_sigma, image_shape)
    f1 = forward(net, x1, seed=s_drop)
    f2 = forward(net, x2, seed=s_drop2)
    l_c, g1, g2 = consistency_loss_and_grad(f1.probs, f2.probs)
    check_finite(l_c, "consistency")
    g1, g2 = consistency_weight * g1, consistency_weight * g2

    report = rel.mc_dropout_uncertainty(net, x, cfg.mc_passes, s_mc, cfg.entropy_threshold)
    values = f1.logits if cfg.unlabeled_uses_logits else f1.probs
    local_rel, cache = rel.unlabeled_relation_with_cache(f1.probs, report, cfg.tau, values)

    l_irm = 0.0
    g_values = None
    if target is not None and cfg.irm_weight != 0.0:
        l_irm, g_entries = rel.irm_loss_and_grad(target, local_rel)
        check_finite(l_irm, "irm")
        g_values = cfg.irm_weight * rel.unlabeled_relation_backward(local_rel, cache, g_entries)

    grad_probs1 = lam * g1
    grad_logits1 = None
    if g_values is not None:
        if cfg.unlabeled_uses_logits:
            grad_logits1 = lam * g_values
        else:
            grad_probs1 = grad_probs1 + lam * g_values
    grads = backward(net, f1, grad_probs=grad_probs1, grad_logits=grad_logits1)
    grads = grads + backward(net, f2, grad_probs=lam * g2)
    loss = lam * (consistency_weight * l_c + cfg.irm_weight * l_irm)
    check_finite(loss, "unlabeled")
    return UnlabeledStep(loss, l_c, l_irm, grads, local_rel, int(report.keep.sum()))


def _minibatches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _adam(params: ParameterSet, cfg: LocalConfig) -> AdamState:
    return AdamState.for_params(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def labeled_local_update(net: Network, dataset: ClientDataset, cfg: LocalConfig, seed: int) -> ParameterSet:
    """`local_epochs` of minibatch Adam on cross-entropy; returns new parameters."""
    x_all, y_all = dataset.features, dataset.targets
    params = net.params.copy()
    state = _adam(params, cfg)
    for epoch_seed in batch_seeds(seed, cfg.local_epochs):
        order_seed, drop_seed = batch_seeds(epoch_seed, 2)
        batches = _minibatches(dataset.n_samples, cfg.batch_size, order_seed)
        for idx, s in zip(batches, batch_seeds(drop_seed, len(batches))):
            _, grads = labeled_objective(net.with_params(params), x_all[idx], y_all[idx], s)
            params, state = adam_step(params, grads, state)
    return params


def unlabeled_local_update(net: Network, dataset: ClientDataset, target: rel.RelationMatrix | None,
                           lam: float, cfg: LocalConfig, seed: int,
                           history: list[UnlabeledStep] | None = None) -> ParameterSet:
    """`local_epochs` of Adam on lam * (consistency + IRM). Never touches targets."""
    if lam < 0:
        raise InvalidInputError("warm-up weight must be non-negative")
    params = net.params.copy()
    if lam == 0.0:
        return params
    x_all = dataset.features
    state = _adam(params, cfg)
    for epoch_seed in batch_seeds(seed, cfg.local_epochs):
        order_seed, step_seed = batch_seeds(epoch_seed, 2)
        batches = _minibatches(dataset.n_samples, cfg.batch_size, order_seed)
        for idx, s in zip(batches, batch_seeds(step_seed, len(batches))):
            step = unlabeled_objective(net.with_params(params), x_all[idx], target, lam, cfg, s,
                                       dataset.image_shape)
            if history is not None:
                history.append(step)
            params, state = adam_step(params, step.grads, state)
    return params
