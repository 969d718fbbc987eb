"""Small fully connected classifier with exact first and second derivatives.

Parameters live in one flat float64 vector.  For widths ``(n_0, ..., n_L)`` the
layout is, layer by layer, the weight matrix ``W_l`` of shape
``(n_l, n_{l+1})`` in row-major order followed by its bias ``b_l``.  A layer
computes ``u = a @ W_l + b_l``; hidden layers apply the activation, the last
layer emits logits.

Hessian-vector products use Pearlmutter's R-operator: the forward and
backward passes are differentiated once more along a parameter direction,
which gives ``H v`` exactly at the cost of about two gradient evaluations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, NumericFaultError
from .rng import stream

ACTIVATIONS = ("tanh", "relu")


def n_params(widths: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


def unpack(theta: np.ndarray, widths: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``[(W_0, b_0), ...]`` into the flat parameter vector."""
    layers = []
    off = 0
    for a, b in zip(widths[:-1], widths[1:]):
        W = theta[off : off + a * b].reshape(a, b)
        off += a * b
        bias = theta[off : off + b]
        off += b
        layers.append((W, bias))
    return layers


@dataclass
class ModelState:
    widths: tuple[int, ...]
    theta: np.ndarray
    activation: str = "tanh"
    velocity: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ConfigurationError("need at least input and output widths")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (n_params(self.widths),):
            raise InvalidInputError(f"theta has {self.theta.size} entries, widths need {n_params(self.widths)}")

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def layers(self):
        return unpack(self.theta, self.widths)

    def with_theta(self, theta) -> "ModelState":
        return replace(self, theta=np.asarray(theta, dtype=np.float64), velocity=None)


def init_model(widths: Sequence[int], seed: int, activation: str = "tanh", index: int = 0) -> ModelState:
    """LeCun-normal weights (variance ``1 / fan_in``), zero biases, from stream ``(seed, "init", index)``."""
    rng = stream(seed, "init", index)
    theta = np.zeros(n_params(widths))
    m = ModelState(tuple(widths), theta, activation)
    for W, b in m.layers:
        W[...] = rng.normal(size=W.shape) / np.sqrt(W.shape[0])
    return m


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    features: np.ndarray


def _act(u, kind):
    return np.tanh(u) if kind == "tanh" else np.maximum(u, 0.0)


def _act_deriv(a, kind):
    """Activation derivative expressed through the activation's output."""
    return 1.0 - a * a if kind == "tanh" else (a > 0).astype(np.float64)


def _forward_cache(m: ModelState, X: np.ndarray):
    if not np.all(np.isfinite(m.theta)):
        raise NumericFaultError("non-finite model parameters")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != m.widths[0]:
        raise InvalidInputError(f"input has dimension {X.shape[1]}, model expects {m.widths[0]}")
    layers = m.layers
    acts = [X]
    a = X
    for l, (W, b) in enumerate(layers):
        u = a @ W + b
        if l < len(layers) - 1:
            a = _act(u, m.activation)
            acts.append(a)
        else:
            z = u
    return layers, acts, z


def forward(m: ModelState, X) -> ForwardResult:
    layers, acts, z = _forward_cache(m, X)
    return ForwardResult(logits=z, probs=softmax(z), features=acts[-1])


def as_target_matrix(targets, C: int) -> np.ndarray:
    """Integer labels become one-hot rows; a 2-D array is used as given."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer):
            raise InvalidInputError("1-D targets must be integer class labels")
        T = np.zeros((t.shape[0], C))
        T[np.arange(t.shape[0]), t] = 1.0
        return T
    if t.ndim != 2 or t.shape[1] != C:
        raise InvalidInputError(f"soft targets must have shape (N, {C})")
    return t.astype(np.float64, copy=False)


def _backward(layers, acts, delta, kind) -> np.ndarray:
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads.append(delta.sum(axis=0))
        grads.append((acts[l].T @ delta).ravel())
        if l > 0:
            delta = (delta @ W.T) * _act_deriv(acts[l], kind)
    return np.concatenate(grads[::-1])


def _loss_terms(z, T):
    logq = log_softmax(z)
    q = np.exp(logq)
    N = z.shape[0]
    loss = -(T * logq).sum() / N
    g_z = (q * T.sum(axis=1, keepdims=True) - T) / N
    return loss, q, g_z


def loss_and_grad(m: ModelState, X, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact parameter gradient.

    ``targets`` is either an integer label vector or an ``(N, C)`` matrix of
    target weights (soft labels, smoothed or mixed targets).  The logit
    gradient per example is ``(q - t) / N``.
    """
    layers, acts, z = _forward_cache(m, X)
    T = as_target_matrix(targets, m.widths[-1])
    if T.shape[0] != z.shape[0]:
        raise InvalidInputError("targets and batch differ in length")
    loss, _, g_z = _loss_terms(z, T)
    return float(loss), _backward(layers, acts, g_z, m.activation)


def loss_value(m: ModelState, X, targets) -> float:
    _, _, z = _forward_cache(m, X)
    T = as_target_matrix(targets, m.widths[-1])
    return float(-(T * log_softmax(z)).sum() / z.shape[0])


def hvp(m: ModelState, X, targets, v) -> np.ndarray:
    """Exact product of the loss Hessian with the parameter-space vector ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != m.theta.shape:
        raise InvalidInputError(f"v has {v.size} entries, model has {m.n_params}")
    kind = m.activation
    layers, acts, z = _forward_cache(m, X)
    T = as_target_matrix(targets, m.widths[-1])
    _, q, g_z = _loss_terms(z, T)
    V = unpack(v, m.widths)
    L = len(layers)

    # R-forward
    Racts = [np.zeros_like(acts[0])]
    for l, ((W, _), (VW, Vb)) in enumerate(zip(layers, V)):
        Ru = Racts[l] @ W + acts[l] @ VW + Vb
        if l < L - 1:
            Racts.append(_act_deriv(acts[l + 1], kind) * Ru)
        else:
            Rz = Ru
    Rq = q * (Rz - (q * Rz).sum(axis=1, keepdims=True))
    Rdelta = T.sum(axis=1, keepdims=True) * Rq / z.shape[0]
    delta = g_z

    # R-backward
    out = []
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        VW, _ = V[l]
        out.append(Rdelta.sum(axis=0))
        out.append((Racts[l].T @ delta + acts[l].T @ Rdelta).ravel())
        if l > 0:
            back = delta @ W.T
            Rback = Rdelta @ W.T + delta @ VW.T
            d = _act_deriv(acts[l], kind)
            Rd = -2.0 * acts[l] * Racts[l] if kind == "tanh" else 0.0
            delta, Rdelta = back * d, Rback * d + back * Rd
    Hv = np.concatenate(out[::-1])
    if not np.all(np.isfinite(Hv)):
        raise NumericFaultError("non-finite Hessian-vector product")
    return Hv


def input_gradient(m: ModelState, X, score_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Gradient of a per-example logit score with respect to each input row.

    ``score_fn(z)`` returns ``(scores, dscores_dz)`` for a logit matrix ``z``.
    """
    layers, acts, z = _forward_cache(m, X)
    _, delta = score_fn(z)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        delta = delta @ W.T
        if l > 0:
            delta = delta * _act_deriv(acts[l], m.activation)
    return delta


def logit_jacobian(m: ModelState, x) -> np.ndarray:
    """``dz/dtheta`` for one input, shape ``(C, P)``."""
    layers, acts, z = _forward_cache(m, np.atleast_2d(x)[:1])
    C = m.widths[-1]
    return np.stack([_backward(layers, acts, np.eye(C)[k : k + 1], m.activation) for k in range(C)])


def last_layer_slice(m: ModelState) -> slice:
    """Position of the final ``(W, b)`` block inside ``theta``."""
    a, b = m.widths[-2], m.widths[-1]
    return slice(m.n_params - (a + 1) * b, m.n_params)


class LossContext:
    """Cross-entropy on a fixed ``(X, T)`` as a function of the flat parameters.

    Geometry estimators only see ``dim``, ``loss``, ``grad`` and ``hvp``, so
    any object with those members (e.g. :class:`QuadraticLoss`) can stand in.
    """

    def __init__(self, model: ModelState, X, targets):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.T = as_target_matrix(targets, model.widths[-1])

    @property
    def dim(self) -> int:
        return self.model.n_params

    def _at(self, theta):
        return self.model if theta is None else self.model.with_theta(theta)

    def loss(self, theta=None) -> float:
        return loss_value(self._at(theta), self.X, self.T)

    def grad(self, theta=None) -> np.ndarray:
        return loss_and_grad(self._at(theta), self.X, self.T)[1]

    def hvp(self, v, theta=None) -> np.ndarray:
        return hvp(self._at(theta), self.X, self.T, v)


class QuadraticLoss:
    """``0.5 * theta^T H theta`` with an explicit symmetric ``H``."""

    def __init__(self, H):
        self.H = np.asarray(H, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def loss(self, theta) -> float:
        return 0.5 * float(theta @ self.H @ theta)

    def grad(self, theta) -> np.ndarray:
        return self.H @ theta

    def hvp(self, v, theta=None) -> np.ndarray:
        return self.H @ v


# Checkpoint byte layout (little-endian):
#   8 bytes   magic b"LDCKPT01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: widths, activation, n_params, seed, epoch, metric, ...
#   8*P bytes float64 parameter vector (P = n_params, layout as in `unpack`)

_CKPT_MAGIC = b"LDCKPT01"


def save_checkpoint(m: ModelState, path, **header) -> None:
    head = {"widths": list(m.widths), "activation": m.activation, "n_params": m.n_params}
    head.update(m.meta)
    head.update(header)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(m.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    head = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    theta = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    if theta.size != head["n_params"]:
        raise InvalidInputError(f"{path}: truncated parameter block")
    meta = {k: v for k, v in head.items() if k not in ("widths", "activation", "n_params")}
    return ModelState(tuple(head["widths"]), theta, head["activation"], meta=meta)
