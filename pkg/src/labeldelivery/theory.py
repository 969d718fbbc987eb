"""Label-sampling moments of the cross-entropy gradient, closed form and Monte Carlo.

For logits ``z`` with ``q = softmax(z)`` and a hard label ``y ~ p`` the logit
gradient is ``q - e_y``.  Its mean is ``q - p``, its covariance
``Diag(p) - p p^T``, and its expected squared norm
``||q - p||^2 + 1 - ||p||^2``.  Through the logit Jacobian ``J`` the parameter
gradient covariance is ``J^T (Diag(p) - p p^T) J``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import check_distribution
from .errors import InvalidInputError
from .rng import Stream


def _pq(q, p):
    q = check_distribution(q)
    p = check_distribution(p)
    if q.shape != p.shape:
        raise InvalidInputError(f"length mismatch: {q.shape} vs {p.shape}")
    return q, p


def expected_logit_grad(q, p) -> np.ndarray:
    q, p = _pq(q, p)
    return q - p


def logit_grad_covariance(p) -> np.ndarray:
    p = check_distribution(p)
    return np.diag(p) - np.outer(p, p)


def expected_grad_sqnorm(q, p) -> float:
    q, p = _pq(q, p)
    return float(((q - p) ** 2).sum() + 1.0 - (p * p).sum())


def param_grad_covariance(J, p) -> np.ndarray:
    J = np.asarray(J, dtype=np.float64)
    p = check_distribution(p)
    if J.ndim != 2 or J.shape[0] != p.shape[0]:
        raise InvalidInputError(f"Jacobian must have {p.shape[0]} rows, got shape {J.shape}")
    return J.T @ logit_grad_covariance(p) @ J


@dataclass
class LabelSamplingStats:
    mean_grad: np.ndarray
    mean_grad_se: np.ndarray
    covariance: np.ndarray
    expected_sqnorm: float
    expected_sqnorm_se: float
    n: int


def sample_label_stats(q, p, n: int, rng: Stream, chunk: int = 100_000) -> LabelSamplingStats:
    """Monte-Carlo moments of ``q - e_y`` over ``n`` draws ``y ~ p``.

    Draws are accumulated in fixed-size chunks in order, so the result only
    depends on the stream and ``n``.
    """
    q, p = _pq(q, p)
    C = p.shape[0]
    s1 = np.zeros(C)
    s2 = np.zeros((C, C))
    sq1 = sq2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        y = rng.categorical(p, size=m)
        G = q[None, :] - np.eye(C)[y]
        s1 += G.sum(axis=0)
        s2 += G.T @ G
        norms = (G * G).sum(axis=1)
        sq1 += norms.sum()
        sq2 += (norms * norms).sum()
        done += m
    mean = s1 / n
    cov = (s2 - n * np.outer(mean, mean)) / (n - 1)
    sq_mean = sq1 / n
    sq_var = (sq2 - n * sq_mean**2) / (n - 1)
    return LabelSamplingStats(
        mean_grad=mean,
        mean_grad_se=np.sqrt(np.clip(np.diag(cov), 0, None) / n),
        covariance=cov,
        expected_sqnorm=float(sq_mean),
        expected_sqnorm_se=float(math.sqrt(max(sq_var, 0.0) / n)),
        n=n,
    )


def frobenius_rel_error(A, B) -> float:
    """``||A - B||_F / ||B||_F``."""
    return float(np.linalg.norm(np.asarray(A) - np.asarray(B)) / np.linalg.norm(B))
