"""Loss-landscape and representation diagnostics at a checkpoint."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset, dist_entropy
from .errors import DegenerateWarning, InvalidInputError, NumericFaultError
from .nnet import LossContext, ModelState, forward, last_layer_slice
from .rng import Stream
from .stats import spearman

BARRIER_POINTS = 21


@dataclass
class GeometryReport:
    lambda_max_full: float
    trace_full: float
    trace_full_se: float
    lambda_max_high: float
    trace_high: float
    trace_high_se: float
    residual_full: float
    residual_high: float
    power_iters: int
    probes: int


def top_eigenvalue(ctx, iters: int = 500, tol: float = 1e-5, rng: Stream | None = None, v0=None):
    """Power iteration on ``ctx.hvp``; returns ``(eigenvalue, residual)``.

    The eigenvalue is the Rayleigh quotient ``v^T H v`` of the unit iterate
    and the residual is ``||H v - lambda v||``.  Iteration stops once the
    residual falls below ``tol * |lambda|`` or after ``iters`` products.  The
    result is the eigenvalue of largest magnitude, signed.
    """
    if iters < 1:
        raise InvalidInputError("iters must be at least 1")
    v = np.asarray(v0, dtype=np.float64) if v0 is not None else rng.normal(size=ctx.dim)
    v = v / np.linalg.norm(v)
    lam, resid = 0.0, math.inf
    for _ in range(iters):
        w = ctx.hvp(v)
        if not np.all(np.isfinite(w)):
            raise NumericFaultError("non-finite Hessian-vector product in power iteration")
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        if resid <= tol * abs(lam):
            break
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, 0.0
        v = w / norm
    return lam, resid


def hessian_trace(ctx, probes: int = 100, rng: Stream | None = None) -> tuple[float, float]:
    """Hutchinson estimate ``mean(v^T H v)`` over Rademacher probes, with its standard error."""
    if probes < 1:
        raise InvalidInputError("probes must be at least 1")
    vals = np.empty(probes)
    for i in range(probes):
        v = rng.rademacher(ctx.dim)
        vals[i] = v @ ctx.hvp(v)
    if not np.all(np.isfinite(vals)):
        raise NumericFaultError("non-finite Hutchinson sample")
    se = float(vals.std(ddof=1) / math.sqrt(probes)) if probes > 1 else math.nan
    return float(vals.mean()), se


def geometry_report(
    model: ModelState, eval_ds: Dataset, high_idx, rng_seed_stream, iters: int = 500, tol: float = 1e-5, probes: int = 100
) -> GeometryReport:
    """Lambda-max and trace of the soft cross-entropy Hessian on the full split and a slice."""
    full = LossContext(model, eval_ds.X, eval_ds.full_dist)
    lam_f, res_f = top_eigenvalue(full, iters, tol, rng_seed_stream("power_iter", 0))
    tr_f, se_f = hessian_trace(full, probes, rng_seed_stream("probe", 0))
    if len(high_idx):
        high = LossContext(model, eval_ds.X[high_idx], eval_ds.full_dist[high_idx])
        lam_h, res_h = top_eigenvalue(high, iters, tol, rng_seed_stream("power_iter", 1))
        tr_h, se_h = hessian_trace(high, probes, rng_seed_stream("probe", 1))
    else:
        lam_h = res_h = tr_h = se_h = math.nan
    return GeometryReport(lam_f, tr_f, se_f, lam_h, tr_h, se_h, res_f, res_h, iters, probes)


def interpolation_curve(theta_a, theta_b, loss_fn, n_points: int = BARRIER_POINTS) -> tuple[np.ndarray, np.ndarray]:
    theta_a = np.asarray(theta_a, dtype=np.float64)
    theta_b = np.asarray(theta_b, dtype=np.float64)
    if theta_a.shape != theta_b.shape:
        raise InvalidInputError("checkpoints have different shapes")
    if n_points < 3:
        raise InvalidInputError("need at least 3 interpolation points")
    ts = np.linspace(0.0, 1.0, n_points)
    step = theta_b - theta_a
    # endpoints are evaluated at the checkpoints themselves, so equal checkpoints give a flat curve
    points = [theta_a] + [theta_a + t * step for t in ts[1:-1]] + [theta_b]
    return ts, np.array([loss_fn(th) for th in points])


def loss_barrier(theta_a, theta_b, loss_fn, n_points: int = BARRIER_POINTS) -> tuple[float, np.ndarray]:
    """Peak loss along the straight line from ``theta_a`` to ``theta_b`` above the worse endpoint.

    The grid includes both endpoints, so the barrier is never negative.
    Returns ``(barrier, losses along the grid)``.
    """
    _, curve = interpolation_curve(theta_a, theta_b, loss_fn, n_points)
    return float(curve.max() - max(curve[0], curve[-1])), curve


def linear_cka(Fa, Fb) -> float:
    """Linear CKA between two feature matrices with the same rows."""
    Fa = np.asarray(Fa, dtype=np.float64)
    Fb = np.asarray(Fb, dtype=np.float64)
    if Fa.ndim != 2 or Fb.ndim != 2 or Fa.shape[0] != Fb.shape[0] or Fa.shape[0] < 2:
        raise InvalidInputError("CKA needs two feature matrices with the same N >= 2 rows")
    Fa = Fa - Fa.mean(axis=0)
    Fb = Fb - Fb.mean(axis=0)
    den = np.linalg.norm(Fa.T @ Fa) * np.linalg.norm(Fb.T @ Fb)
    if den == 0:
        warnings.warn("zero-variance features; CKA undefined", DegenerateWarning, stacklevel=2)
        return math.nan
    return float(np.linalg.norm(Fa.T @ Fb) ** 2 / den)


@dataclass
class GradVarianceProbe:
    empirical: np.ndarray
    empirical_se: np.ndarray
    closed_form: np.ndarray
    entropy: np.ndarray
    spearman_vs_entropy: float


def gradient_variance_probe(model: ModelState, ds: Dataset, n_draws: int, rng: Stream) -> GradVarianceProbe:
    """Total variance of the last-layer gradient under labels redrawn from each ``full_dist``.

    For each example, ``n_draws`` labels ``y ~ p`` give last-layer gradients
    ``(q - e_y) (x) [h, 1]``; the empirical trace of their covariance is
    compared with the closed form ``tr(J^T (Diag(p) - p p^T) J)`` restricted
    to the last layer, which equals ``(1 - ||p||^2) (||h||^2 + 1)``.
    """
    if n_draws < 2:
        raise InvalidInputError("n_draws must be at least 2")
    out = forward(model, ds.X)
    q, h = out.probs, out.features
    h1 = np.hstack([h, np.ones((h.shape[0], 1))])
    N, C = q.shape
    emp = np.empty(N)
    emp_se = np.empty(N)
    for i in range(N):
        y = rng.categorical(ds.full_dist[i], size=n_draws)
        G = q[i][None, :] - np.eye(C)[y]
        # rows of the (n_draws, C * (H + 1)) gradient matrix, layout matching W then b
        grads = np.einsum("nc,h->nhc", G, h1[i]).reshape(n_draws, -1)
        # shifting by the first draw first keeps identical draws at exactly zero spread
        grads = grads - grads[0]
        dev = ((grads - grads.mean(axis=0)) ** 2).sum(axis=1)
        emp[i] = dev.sum() / (n_draws - 1)
        emp_se[i] = dev.std(ddof=1) * n_draws / (n_draws - 1) / math.sqrt(n_draws)
    p = ds.full_dist
    closed = (1.0 - (p * p).sum(axis=1)) * (h1 * h1).sum(axis=1)
    H = dist_entropy(p)
    return GradVarianceProbe(emp, emp_se, closed, H, spearman(H, emp))


def last_layer_closed_form(model: ModelState, x, p) -> float:
    """``tr(J^T (Diag(p) - p p^T) J)`` over the last-layer block of ``J``, by explicit Jacobian."""
    from .nnet import logit_jacobian
    from .theory import param_grad_covariance

    J = logit_jacobian(model, x)[:, last_layer_slice(model)]
    return float(np.trace(param_grad_covariance(J, p)))
