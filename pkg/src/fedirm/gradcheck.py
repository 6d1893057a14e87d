"""Central finite-difference checks of every training loss on random tiny networks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Network, ParameterSet, build_network
from .relation import RelationMatrix
from .training import LocalConfig, labeled_objective, unlabeled_objective

FD_STEP = 1e-4
TOLERANCE = 1e-4

# (net, x, y, target relation, seed) -> (loss, grads)
Objective = Callable[[Network, np.ndarray, np.ndarray, RelationMatrix, int], tuple[float, ParameterSet]]


def _check_cfg(n_classes: int) -> LocalConfig:
    # Keep nearly every sample so the relation term is exercised.
    return LocalConfig(mc_passes=4, entropy_threshold=math.log(n_classes) - 1e-3, noise_sigma=0.1)


def _cross_entropy(net, x, y, target, seed):
    return labeled_objective(net, x, y, seed)


def _consistency(net, x, y, target, seed):
    step = unlabeled_objective(net, x, None, 1.0, _check_cfg(net.n_classes), seed)
    return step.loss, step.grads


def _irm(net, x, y, target, seed):
    step = unlabeled_objective(net, x, target, 1.0, _check_cfg(net.n_classes), seed, consistency_weight=0.0)
    return step.loss, step.grads


def _unlabeled_total(net, x, y, target, seed):
    step = unlabeled_objective(net, x, target, 0.7, _check_cfg(net.n_classes), seed)
    return step.loss, step.grads


LOSSES: dict[str, Objective] = {
    "cross_entropy": _cross_entropy,
    "consistency": _consistency,
    "irm": _irm,
    "unlabeled_total": _unlabeled_total,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss_fn: Callable[[ParameterSet], float], params: ParameterSet, step: float = FD_STEP) -> np.ndarray:
    sig = params.shape_signature
    theta = params.flat()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = loss_fn(ParameterSet.from_flat(sig, theta))
        theta[i] = orig - step
        down = loss_fn(ParameterSet.from_flat(sig, theta))
        theta[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def random_instance(rng: np.random.Generator):
    """Tiny tanh net (<= 100 parameters), a batch, targets and a valid relation target."""
    d = int(rng.integers(2, 5))
    c = int(rng.integers(2, 5))
    h1, h2 = (int(v) for v in rng.integers(2, 5, size=2))
    net = build_network(d, c, (h1, h2), "tanh", 0.3, int(rng.integers(2**31)))
    # Spread the weights so some predictions are confident enough to pass the filter.
    net = net.with_params(ParameterSet([(w * 3.0, b) for w, b in net.params.layers]))
    b = int(rng.integers(3, 9))
    x = rng.standard_normal((b, d))
    y = rng.integers(0, c, size=b)
    rows = rng.dirichlet(np.ones(c), size=c)
    target = RelationMatrix(rows, np.ones(c, dtype=bool), "server-aggregate")
    return net, x, y, target


@dataclass
class GradcheckReport:
    max_error: dict[str, float]
    trials: int
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return all(err <= self.tolerance for err in self.max_error.values())

    def failures(self) -> list[str]:
        return [name for name, err in self.max_error.items() if err > self.tolerance]

    def lines(self) -> list[str]:
        return [
            f"{name:16s} max_rel_err={err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in self.max_error.items()
        ]


def run_gradcheck(seed: int = 0, trials: int = 20, losses: dict[str, Objective] | None = None) -> GradcheckReport:
    losses = LOSSES if losses is None else losses
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in losses}
    for _ in range(trials):
        net, x, y, target = random_instance(rng)
        loss_seed = int(rng.integers(2**31))
        for name, objective in losses.items():
            _, grads = objective(net, x, y, target, loss_seed)
            numeric = numeric_gradient(lambda p: objective(net.with_params(p), x, y, target, loss_seed)[0], net.params)
            worst[name] = max(worst[name], relative_error(grads.flat(), numeric))
    return GradcheckReport(worst, trials)
