"""Endpoint evaluation of predicted distributions against annotator targets.

Log quantities are in nats.  "Accuracy" anywhere in this module means
agreement with the majority annotator label (ties to the lowest class).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import dist_entropy, majority_label
from .errors import DegenerateWarning, InvalidInputError
from .stats import spearman

Q_FLOOR = 1e-12
REPORT_COLUMNS = (
    "soft_nll",
    "kl_to_annotator",
    "soft_brier",
    "hard_acc_all",
    "ece_eqmass",
    "smooth_ece",
    "entropy_corr",
    "brier_reliability",
    "brier_resolution",
    "brier_uncertainty",
)


def _pair(Q, P):
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if Q.shape != P.shape:
        raise InvalidInputError(f"predictions {Q.shape} and targets {P.shape} differ in shape")
    return Q, P


def proper_scores(Q, P) -> tuple[float, float, float]:
    """Mean soft NLL ``H(p, q)``, mean ``KL(p || q)`` and mean soft Brier ``||p - q||^2``.

    Predicted probabilities below ``1e-12`` are clamped there (with a warning)
    wherever the target puts mass.
    """
    Q, P = _pair(Q, P)
    clamp = (Q < Q_FLOOR) & (P > 0)
    if clamp.any():
        warnings.warn(f"clamped {int(clamp.sum())} predicted probabilities at {Q_FLOOR}", DegenerateWarning, stacklevel=2)
    logq = np.log(np.maximum(Q, Q_FLOOR))
    pos = P > 0
    cross = -np.where(pos, P * logq, 0.0).sum(axis=1)
    with np.errstate(divide="ignore"):
        logp = np.where(pos, np.log(np.where(pos, P, 1.0)), 0.0)
    kl = np.where(pos, P * (logp - logq), 0.0).sum(axis=1)
    brier = ((P - Q) ** 2).sum(axis=1)
    return float(cross.mean()), float(kl.mean()), float(brier.mean())


def hard_acc_all(Q, P) -> float:
    Q, P = _pair(Q, P)
    return float(np.mean(np.argmax(Q, axis=1) == majority_label(P)))


def _conf_correct(Q, P):
    Q, P = _pair(Q, P)
    return Q.max(axis=1), (np.argmax(Q, axis=1) == majority_label(P)).astype(np.float64)


def reliability_bins(Q, P, bins: int = 15) -> list[tuple[float, float, int]]:
    """Equal-mass bins as ``(mean confidence, accuracy, size)``, lowest confidence first."""
    conf, correct = _conf_correct(Q, P)
    n = conf.size
    if n < bins:
        warnings.warn(f"only {n} examples for {bins} bins; using {n} bins", DegenerateWarning, stacklevel=3)
        bins = n
    order = np.argsort(conf, kind="stable")
    return [
        (float(conf[b].mean()), float(correct[b].mean()), int(b.size))
        for b in np.array_split(order, bins)
        if b.size
    ]


def ece_eqmass(Q, P, bins: int = 15) -> float:
    """ECE over ``bins`` near-equal-count confidence bins."""
    if bins < 1:
        raise InvalidInputError("bins must be at least 1")
    table = reliability_bins(Q, P, bins)
    n = sum(size for _, _, size in table)
    return float(sum(size / n * abs(c - a) for c, a, size in table))


@dataclass
class SmoothReliability:
    grid: np.ndarray
    curve: np.ndarray
    density: np.ndarray
    smooth_ece: float
    degenerate: bool = False


def smooth_reliability(Q, P, bandwidth: float = 0.05, grid_size: int = 101) -> SmoothReliability:
    """Gaussian-kernel reliability curve on a uniform grid over ``[0, 1]``.

    ``curve(g)`` is the kernel-weighted accuracy around confidence ``g``.
    ``smooth_ece`` integrates ``|smoothed accuracy - smoothed confidence|``
    against the kernel density of confidences, so a sample whose accuracy
    equals its confidence scores zero even where the kernel is wide.
    """
    if bandwidth <= 0:
        raise InvalidInputError("bandwidth must be positive")
    conf, correct = _conf_correct(Q, P)
    grid = np.linspace(0.0, 1.0, grid_size)
    logw = -0.5 * ((grid[:, None] - conf[None, :]) / bandwidth) ** 2
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w_sum = w.sum(axis=1)
    curve = (w @ correct) / w_sum
    resid = (w @ (correct - conf)) / w_sum
    dens = np.exp(-0.5 * ((grid[:, None] - conf[None, :]) / bandwidth) ** 2).sum(axis=1)
    if dens.sum() > 0:
        dens = dens / dens.sum()
    else:
        dens = np.full(grid_size, 1.0 / grid_size)
    degenerate = bool(np.ptp(conf) == 0)
    if degenerate:
        warnings.warn("all confidences are equal; reliability curve is flat", DegenerateWarning, stacklevel=2)
    return SmoothReliability(grid, curve, dens, float(dens @ np.abs(resid)), degenerate)


def entropy_correlation(Q, P) -> float:
    """Spearman correlation of predicted vs annotator entropies; 0.0 (with a warning) if undefined."""
    Q, P = _pair(Q, P)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        rho = spearman(dist_entropy(Q), dist_entropy(P))
    if np.isnan(rho):
        warnings.warn("constant entropies; entropy correlation reported as 0", DegenerateWarning, stacklevel=2)
        return 0.0
    return rho


def _binned_forecasts(Q, P, bins):
    Q, P = _pair(Q, P)
    if bins < 1:
        raise InvalidInputError("bins must be at least 1")
    O = np.zeros_like(Q)
    O[np.arange(Q.shape[0]), majority_label(P)] = 1.0
    idx = np.minimum((Q * bins).astype(np.int64), bins - 1)
    return Q, O, idx


def brier_decomposition(Q, P, bins: int = 10) -> tuple[float, float, float]:
    """Murphy reliability, resolution and uncertainty, summed over classes.

    Each class's predicted probability is binned into ``bins`` equal-width
    bins on ``[0, 1]``; the outcome is the majority-label indicator.  The
    components satisfy ``binned_brier = reliability - resolution + uncertainty``.
    """
    Q, O, idx = _binned_forecasts(Q, P, bins)
    N, C = Q.shape
    rel = res = unc = 0.0
    for k in range(C):
        o_bar = O[:, k].mean()
        unc += o_bar * (1.0 - o_bar)
        n_b = np.bincount(idx[:, k], minlength=bins)
        keep = n_b > 0
        f_b = np.bincount(idx[:, k], weights=Q[:, k], minlength=bins)[keep] / n_b[keep]
        o_b = np.bincount(idx[:, k], weights=O[:, k], minlength=bins)[keep] / n_b[keep]
        w = n_b[keep] / N
        rel += float(w @ (f_b - o_b) ** 2)
        res += float(w @ (o_b - o_bar) ** 2)
    return rel, res, float(unc)


def binned_brier(Q, P, bins: int = 10) -> float:
    """Multi-class Brier score after replacing each forecast by its bin mean."""
    Q, O, idx = _binned_forecasts(Q, P, bins)
    total = 0.0
    for k in range(Q.shape[1]):
        n_b = np.bincount(idx[:, k], minlength=bins)
        sums = np.bincount(idx[:, k], weights=Q[:, k], minlength=bins)
        f_b = np.divide(sums, n_b, out=np.zeros(bins), where=n_b > 0)
        total += float(((f_b[idx[:, k]] - O[:, k]) ** 2).mean())
    return total


def brier_score(Q, P) -> float:
    """Multi-class Brier score against the majority-label one-hot outcome."""
    Q, O, _ = _binned_forecasts(Q, P, 1)
    return float(((Q - O) ** 2).sum(axis=1).mean())


@dataclass
class EvalReport:
    soft_nll: float
    kl_to_annotator: float
    soft_brier: float
    hard_acc_all: float
    ece_eqmass: float
    smooth_ece: float
    entropy_corr: float
    brier_reliability: float
    brier_resolution: float
    brier_uncertainty: float
    reliability_curve: list = field(default_factory=list, repr=False)

    def scalars(self) -> dict[str, float]:
        d = asdict(self)
        return {k: d[k] for k in REPORT_COLUMNS}


def evaluate(Q, P, ece_bins: int = 15, brier_bins: int = 10, bandwidth: float = 0.05) -> EvalReport:
    nll, kl, sb = proper_scores(Q, P)
    rel, res, unc = brier_decomposition(Q, P, brier_bins)
    return EvalReport(
        soft_nll=nll,
        kl_to_annotator=kl,
        soft_brier=sb,
        hard_acc_all=hard_acc_all(Q, P),
        ece_eqmass=ece_eqmass(Q, P, ece_bins),
        smooth_ece=smooth_reliability(Q, P, bandwidth).smooth_ece,
        entropy_corr=entropy_correlation(Q, P),
        brier_reliability=rel,
        brier_resolution=res,
        brier_uncertainty=unc,
        reliability_curve=[(c, a) for c, a, _ in reliability_bins(Q, P, ece_bins)],
    )
