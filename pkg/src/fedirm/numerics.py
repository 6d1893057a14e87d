"""Dense numerics for a small dropout MLP classifier.

Everything runs in float64 numpy. The network is a plain stack of affine
layers with a hidden nonlinearity, one (inverted) dropout layer in front of
the output layer, and a softmax head. Reverse mode is hand-written for this
fixed architecture; losses hand in gradients with respect to the softmax
output (or the logits) and `backward` carries them down to the weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, NumericalFailure

LOG_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"FIRM"
CHECKPOINT_VERSION = 1


@dataclass
class ParameterSet:
    """Ordered (weight, bias) pairs; weight is [out, in], bias is [out]."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def shape_signature(self) -> tuple[int, ...]:
        if not self.layers:
            return ()
        dims = [self.layers[0][0].shape[1]]
        dims.extend(w.shape[0] for w, _ in self.layers)
        return tuple(dims)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def copy(self) -> ParameterSet:
        return ParameterSet([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> ParameterSet:
        return ParameterSet([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def check_compatible(self, other: ParameterSet, what: str = "parameter set") -> None:
        if self.shape_signature != other.shape_signature:
            raise InvalidInputError(
                f"{what}: shape signature {other.shape_signature} != {self.shape_signature}"
            )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, signature: tuple[int, ...], vec: np.ndarray) -> ParameterSet:
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(o * i + o for i, o in zip(signature[:-1], signature[1:]))
        if vec.size != expected:
            raise InvalidInputError(f"flat vector has {vec.size} values, signature needs {expected}")
        layers = []
        pos = 0
        for n_in, n_out in zip(signature[:-1], signature[1:]):
            w = vec[pos : pos + n_in * n_out].reshape(n_out, n_in).copy()
            pos += n_in * n_out
            b = vec[pos : pos + n_out].copy()
            pos += n_out
            layers.append((w, b))
        return cls(layers)

    def __add__(self, other: ParameterSet) -> ParameterSet:
        self.check_compatible(other)
        return ParameterSet([(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def scaled(self, factor: float) -> ParameterSet:
        return ParameterSet([(w * factor, b * factor) for w, b in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def bit_equal(self, other: ParameterSet) -> bool:
        if self.shape_signature != other.shape_signature:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_parameters(signature: tuple[int, ...], seed: int) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    if len(signature) < 2 or any(d < 1 for d in signature):
        raise InvalidInputError(f"bad layer dimensions {signature}")
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(signature[:-1], signature[1:]):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        layers.append((w, b))
    return ParameterSet(layers)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
}


@dataclass
class Network:
    params: ParameterSet
    n_classes: int
    activation: str = "tanh"
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout rate must lie in [0, 1)")
        if self.params.shape_signature[-1] != self.n_classes:
            raise InvalidInputError(
                f"output width {self.params.shape_signature[-1]} != class count {self.n_classes}"
            )

    @property
    def input_dim(self) -> int:
        return self.params.shape_signature[0]

    def with_params(self, params: ParameterSet) -> Network:
        return Network(params, self.n_classes, self.activation, self.dropout_rate)


def build_network(
    input_dim: int,
    n_classes: int,
    hidden: tuple[int, ...] = (64, 64),
    activation: str = "tanh",
    dropout_rate: float = 0.3,
    seed: int = 0,
) -> Network:
    signature = (input_dim, *hidden, n_classes)
    return Network(init_parameters(signature, seed), n_classes, activation, dropout_rate)


@dataclass
class Tape:
    """Intermediates kept by `forward` for `backward`."""

    inputs: list[np.ndarray]  # input to each affine layer
    activations: list[np.ndarray]  # post-nonlinearity hidden outputs
    pre: list[np.ndarray]  # hidden pre-activations
    mask: np.ndarray | None  # scaled dropout mask on the last hidden layer


@dataclass
class Forward:
    logits: np.ndarray
    probs: np.ndarray
    tape: Tape = field(repr=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def temperature_softmax(v: np.ndarray, tau: float) -> np.ndarray:
    """softmax(v / tau) along the last axis."""
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("temperature_softmax input must be finite")
    return softmax(v / tau)


def temperature_softmax_backward(s: np.ndarray, grad_s: np.ndarray, tau: float) -> np.ndarray:
    return softmax_backward(s, grad_s) / tau


def dropout_mask(shape: tuple[int, ...], rate: float, seed: int) -> np.ndarray:
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def forward(net: Network, batch: np.ndarray, seed: int | None = None) -> Forward:
    """Run the network; `seed` switches on train mode (dropout driven by that seed).

    With ``seed=None`` the pass is in eval mode and dropout is the identity.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != net.input_dim:
        raise InvalidInputError(f"batch shape {x.shape} does not match input dim {net.input_dim}")
    act, _ = _ACTIVATIONS[net.activation]
    inputs, acts, pres = [], [], []
    h = x
    layers = net.params.layers
    for w, b in layers[:-1]:
        inputs.append(h)
        z = h @ w.T + b
        h = act(z)
        pres.append(z)
        acts.append(h)
    mask = None
    if seed is not None and net.dropout_rate > 0.0:
        mask = dropout_mask(h.shape, net.dropout_rate, seed)
        h = h * mask
    inputs.append(h)
    w, b = layers[-1]
    logits = h @ w.T + b
    return Forward(logits, softmax(logits), Tape(inputs, acts, pres, mask))


def backward(
    net: Network,
    fwd: Forward,
    grad_probs: np.ndarray | None = None,
    grad_logits: np.ndarray | None = None,
) -> ParameterSet:
    """Pull a loss gradient on probs and/or logits back to the parameters."""
    g = np.zeros_like(fwd.logits)
    if grad_probs is not None:
        g = g + softmax_backward(fwd.probs, grad_probs)
    if grad_logits is not None:
        g = g + grad_logits
    _, dact = _ACTIVATIONS[net.activation]
    tape = fwd.tape
    layers = net.params.layers
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
        if k == 0:
            break
        g = g @ w
        if k == len(layers) - 1 and tape.mask is not None:
            g = g * tape.mask
        g = g * dact(tape.pre[k - 1], tape.activations[k - 1])
    return ParameterSet(grads)


def check_finite(value: float, loss_name: str) -> float:
    if not np.isfinite(value):
        raise NumericalFailure(loss_name, float(value))
    return value


@dataclass
class AdamState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: ParameterSet, grads: ParameterSet, state: AdamState) -> tuple[ParameterSet, AdamState]:
    params.check_compatible(grads, "gradients")
    params.check_compatible(state.m, "optimizer state")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_layers, m_layers, v_layers = [], [], []
    for (p_w, p_b), (g_w, g_b), (m_w, m_b), (v_w, v_b) in zip(
        params.layers, grads.layers, state.m.layers, state.v.layers
    ):
        pair, mpair, vpair = [], [], []
        for p, g, m, v in ((p_w, g_w, m_w, v_w), (p_b, g_b, m_b, v_b)):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            pair.append(p)
            mpair.append(m)
            vpair.append(v)
        new_layers.append(tuple(pair))
        m_layers.append(tuple(mpair))
        v_layers.append(tuple(vpair))
    new_state = AdamState(
        ParameterSet(m_layers), ParameterSet(v_layers), t, state.lr, b1, b2, state.eps
    )
    return ParameterSet(new_layers), new_state


# Checkpoint layout (all little-endian):
#   4 bytes  magic "FIRM"
#   uint32   format version
#   uint32   number of dims L+1
#   uint32 * (L+1) shape signature (input, hidden..., classes)
#   float32 values: for each layer, weight [out, in] row-major, then bias [out]


def parameters_to_bytes(params: ParameterSet) -> bytes:
    sig = params.shape_signature
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(sig)}I", CHECKPOINT_VERSION, len(sig), *sig)
    body = params.flat().astype("<f4").tobytes()
    return header + body


def parameters_from_bytes(blob: bytes) -> ParameterSet:
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, n_dims = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = 12 + 4 * n_dims
    if n_dims < 2 or len(blob) < offset:
        raise FormatError("truncated checkpoint header")
    sig = struct.unpack_from(f"<{n_dims}I", blob, 12)
    count = sum(o * i + o for i, o in zip(sig[:-1], sig[1:]))
    if len(blob) != offset + 4 * count:
        raise FormatError(f"checkpoint body holds {(len(blob) - offset) // 4} values, expected {count}")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64)
    return ParameterSet.from_flat(tuple(sig), values)


def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    Path(path).write_bytes(parameters_to_bytes(params))


def load_checkpoint(path: str | Path) -> ParameterSet:
    return parameters_from_bytes(Path(path).read_bytes())
