"""Out-of-distribution scores and AUROC.

Every score follows the convention "higher means more in-distribution", so
an AUROC above 0.5 always means the detector separates in from out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, dist_entropy
from .errors import ConfigurationError, InvalidInputError
from .nnet import ModelState, forward, input_gradient, softmax
from .rng import Stream

SCORE_TYPES = ("msp", "energy", "entropy", "margin", "odin", "knn")
DEFAULT_PARAMS = {
    "energy_T": 1.0,
    "odin_T": 1000.0,
    "odin_eps": 0.0014,
    "knn_k": 50,
}


@dataclass
class ScoredSet:
    scores: np.ndarray
    origin: str
    score_type: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.origin not in ("in", "out"):
            raise InvalidInputError(f"origin must be 'in' or 'out', got {self.origin!r}")
        if self.score_type not in SCORE_TYPES:
            raise InvalidInputError(f"unknown score type {self.score_type!r}")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError("scores must be finite")


def _l2_normalize(F):
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return F / np.where(norms > 0, norms, 1.0)


class KNNIndex:
    """Read-only index of l2-normalized training features."""

    def __init__(self, features):
        F = np.asarray(features, dtype=np.float64)
        if F.ndim != 2 or F.shape[0] < 1:
            raise InvalidInputError("need a non-empty feature matrix")
        self.features = _l2_normalize(F)

    def __len__(self):
        return self.features.shape[0]

    def kth_distance(self, queries, k: int, chunk: int = 64) -> np.ndarray:
        if not 1 <= k <= len(self):
            raise ConfigurationError(f"k={k} outside [1, {len(self)}]")
        Q = _l2_normalize(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
        out = np.empty(Q.shape[0])
        for s in range(0, Q.shape[0], chunk):
            diff = Q[s : s + chunk, None, :] - self.features[None, :, :]
            d = np.sqrt((diff * diff).sum(axis=2))
            out[s : s + chunk] = np.partition(d, k - 1, axis=1)[:, k - 1]
        return out


def fit_knn_index(model: ModelState, X_train) -> KNNIndex:
    return KNNIndex(forward(model, X_train).features)


def _logsumexp(z):
    zmax = z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]


def msp_score(z):
    return softmax(z).max(axis=1)


def energy_score(z, T: float = 1.0):
    """``T * logsumexp(z / T)``; at least the max logit, at most ``max + T ln C``."""
    return T * _logsumexp(np.asarray(z) / T)


def entropy_score(z):
    return -dist_entropy(softmax(z))


def margin_score(z):
    top2 = np.sort(z, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def odin_score(model: ModelState, X, T: float = 1000.0, eps: float = 0.0014):
    """Tempered max softmax after one signed-gradient step that raises it.

    The step ``x + eps * sign(grad_x log max_k softmax(z / T))`` keeps the
    argmax class of the unperturbed input fixed while differentiating.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k = np.argmax(forward(model, X).logits, axis=1)

    def tempered_log_msp(z):
        q = softmax(z / T)
        onehot = np.zeros_like(q)
        onehot[np.arange(z.shape[0]), k] = 1.0
        return np.log(q[np.arange(z.shape[0]), k]), (onehot - q) / T

    g = input_gradient(model, X, tempered_log_msp)
    Xp = X + eps * np.sign(g)
    return softmax(forward(model, Xp).logits / T).max(axis=1)


def score(model: ModelState, X, score_type: str, params: dict | None = None, index: KNNIndex | None = None):
    """Per-example OOD score of type ``score_type`` for the rows of ``X``."""
    if score_type not in SCORE_TYPES:
        raise ConfigurationError(f"unknown score type {score_type!r}; choose from {SCORE_TYPES}")
    p = {**DEFAULT_PARAMS, **(params or {})}
    if score_type == "odin":
        return odin_score(model, X, p["odin_T"], p["odin_eps"])
    out = forward(model, X)
    if score_type == "knn":
        if index is None:
            raise ConfigurationError("knn scoring needs a fitted training-feature index")
        return -index.kth_distance(out.features, int(p["knn_k"]))
    z = out.logits
    if score_type == "msp":
        return msp_score(z)
    if score_type == "energy":
        return energy_score(z, p["energy_T"])
    if score_type == "entropy":
        return entropy_score(z)
    return margin_score(z)


def auroc(in_scores, out_scores) -> float:
    """P(in > out) + 0.5 P(in == out), from the Mann-Whitney rank sum."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("AUROC needs non-empty in and out score sets")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def far_ood(ds: Dataset, rng: Stream, shift_sigma: float = 10.0) -> np.ndarray:
    """Inputs of ``ds`` translated by ``shift_sigma`` cluster spreads in every coordinate.

    The sign of the shift in each coordinate is random, so the shifted cloud
    does not sit on any cluster axis.
    """
    sigma = float(ds.provenance.get("overlap", 1.0))
    signs = np.where(rng.random(ds.d) < 0.5, -1.0, 1.0)
    return ds.X + shift_sigma * sigma * signs


def near_ood(ds: Dataset, rng: Stream) -> np.ndarray:
    """Each feature column permuted independently across examples.

    Per-feature marginals match the in-distribution data exactly while the
    joint cluster structure is destroyed.
    """
    X = ds.X.copy()
    for j in range(ds.d):
        X[:, j] = X[rng.permutation(X.shape[0]), j]
    return X


def ood_table(model: ModelState, X_in, X_out, score_types=SCORE_TYPES, params=None, index=None) -> dict[str, float]:
    """AUROC per score type for one in/out pair."""
    res = {}
    for st in score_types:
        s_in = ScoredSet(score(model, X_in, st, params, index), "in", st)
        s_out = ScoredSet(score(model, X_out, st, params, index), "out", st)
        res[st] = auroc(s_in.scores, s_out.scores)
    return res

