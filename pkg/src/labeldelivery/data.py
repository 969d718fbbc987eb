"""Synthetic annotator populations, vote subsampling, divergences and splits.

Datasets are stored column-wise as numpy arrays.  Row ``i`` of ``full_dist``
is the dense annotator distribution of example ``i``; row ``i`` of ``counts``
(when present) holds its integer votes, and ``counts / counts.sum()`` is then
the training target.  Evaluation always scores against ``full_dist``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateWarning, InvalidInputError
from .rng import Stream, stream

DIST_ATOL = 1e-9


def check_distribution(p, atol: float = DIST_ATOL) -> np.ndarray:
    """Validate a probability vector (or a matrix of row vectors) and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or p.shape[-1] < 1:
        raise InvalidInputError(f"expected a vector or matrix of distributions, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("distribution entries must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise InvalidInputError("distribution entries must sum to 1")
    return p


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    full_dist: np.ndarray
    counts: np.ndarray | None = None
    true_posterior: np.ndarray | None = None


@dataclass
class Dataset:
    """An ordered set of examples sharing class count ``C`` and feature dimension ``d``.

    ``ids`` are the example identities in the generating dataset; subsets
    produced by splitting keep them, so a split can be undone.
    """

    X: np.ndarray
    full_dist: np.ndarray
    counts: np.ndarray | None = None
    true_posterior: np.ndarray | None = None
    ids: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.full_dist = check_distribution(np.atleast_2d(self.full_dist))
        n = self.X.shape[0]
        if self.full_dist.shape[0] != n:
            raise InvalidInputError("X and full_dist disagree on the number of examples")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != self.full_dist.shape:
                raise InvalidInputError("counts must have the same shape as full_dist")
            if np.any(self.counts < 0) or np.any(self.counts.sum(axis=1) < 1):
                raise InvalidInputError("every example needs at least one non-negative vote")
        if self.true_posterior is not None:
            self.true_posterior = check_distribution(self.true_posterior)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(
            x=self.X[i],
            full_dist=self.full_dist[i],
            counts=None if self.counts is None else self.counts[i],
            true_posterior=None if self.true_posterior is None else self.true_posterior[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def C(self) -> int:
        return self.full_dist.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def examples(self) -> list[Example]:
        return list(self)

    def target(self) -> np.ndarray:
        """Per-example training target: normalized votes if present, else ``full_dist``."""
        if self.counts is None:
            return self.full_dist
        return counts_to_distribution(self.counts)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            X=self.X[index],
            full_dist=self.full_dist[index],
            counts=None if self.counts is None else self.counts[index],
            true_posterior=None if self.true_posterior is None else self.true_posterior[index],
            ids=self.ids[index],
            provenance=dict(self.provenance),
        )

    def with_counts(self, counts) -> "Dataset":
        return replace(self, counts=np.asarray(counts, dtype=np.int64), provenance=dict(self.provenance))


def simplex_centers(C: int, d: int, separation: float, seed: int | None = None) -> np.ndarray:
    """Cluster centers ``separation * e_k`` when ``d >= C``; Gaussian draws otherwise."""
    if d >= C:
        centers = np.zeros((C, d))
        centers[np.arange(C), np.arange(C)] = separation
        return centers
    return separation * stream(seed or 0, "centers").normal(size=(C, d))


def gaussian_posterior(X, centers, overlap: float) -> np.ndarray:
    """Equal-prior class posterior under isotropic Gaussian clusters of spread ``overlap``."""
    X = np.asarray(X, dtype=np.float64)
    sq = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    logits = -sq / (2.0 * overlap**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def make_synthetic_task(
    n: int,
    C: int,
    d: int,
    overlap: float,
    votes_per_example: int,
    rng_seed: int,
    separation: float = 2.0,
    centers=None,
) -> Dataset:
    """Draw ``n`` examples from ``C`` isotropic Gaussian clusters with known posteriors.

    Cluster memberships are balanced (``n // C`` each, remainder to the lowest
    classes) and shuffled.  ``full_dist`` is the closed-form posterior; each
    example also carries ``votes_per_example`` simulated annotator votes drawn
    from it.
    """
    if not (n >= C >= 2) or d < 1 or not overlap > 0 or votes_per_example < 1:
        raise ConfigurationError(
            f"need n >= C >= 2, d >= 1, overlap > 0, votes >= 1 (got n={n}, C={C}, d={d}, "
            f"overlap={overlap}, votes={votes_per_example})"
        )
    if centers is None:
        centers = simplex_centers(C, d, separation, rng_seed)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (C, d):
        raise ConfigurationError(f"centers must have shape {(C, d)}")

    membership = np.arange(n) % C
    feat = stream(rng_seed, "features")
    membership = membership[feat.permutation(n)]
    X = centers[membership] + overlap * feat.normal(size=(n, d))
    post = gaussian_posterior(X, centers, overlap)
    counts = np.stack([stream(rng_seed, "votes", i).multinomial(votes_per_example, post[i]) for i in range(n)])
    return Dataset(
        X=X,
        full_dist=post,
        counts=counts,
        true_posterior=post.copy(),
        provenance={
            "generator": "gaussian_clusters",
            "seed": int(rng_seed),
            "n": n,
            "C": C,
            "d": d,
            "overlap": float(overlap),
            "separation": float(separation),
            "votes_per_example": int(votes_per_example),
        },
    )


def subsample_counts(p, K: int, rng: Stream) -> np.ndarray:
    """Simulate ``K`` annotator votes from distribution ``p``."""
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    return rng.multinomial(K, check_distribution(p))


def subsample_dataset(ds: Dataset, K: int, seed: int) -> Dataset:
    """Replace every example's votes with ``K`` fresh draws from its ``full_dist``.

    Example ``i`` uses the stream ``(seed, "subsample", K * 2**32 + id_i)``,
    so each ``K`` is an independent draw and the result does not depend on
    the order of examples.
    """
    counts = np.stack(
        [subsample_counts(ds.full_dist[j], K, stream(seed, "subsample", (K << 32) + int(i))) for j, i in enumerate(ds.ids)]
    )
    out = ds.with_counts(counts)
    out.provenance["subsample"] = {"K": int(K), "seed": int(seed)}
    return out


def counts_to_distribution(v) -> np.ndarray:
    v = np.asarray(v)
    m = v.sum(axis=-1, keepdims=True)
    if np.any(m <= 0):
        raise InvalidInputError("vote total must be positive")
    return v / m


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def _kl2(p, m):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p / m), 0.0)
    return terms.sum(axis=-1)


def js_distance(p, q):
    """Square root of the base-2 Jensen-Shannon divergence (row-wise for matrices)."""
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    js = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return np.sqrt(np.clip(js, 0.0, 1.0))


def l1_distance(p, q):
    p, q = _pair(p, q)
    return np.abs(p - q).sum(axis=-1)


def dist_entropy(p):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def majority_label(target):
    """Argmax of a distribution or vote vector; ties go to the lowest class index."""
    return np.argmax(np.asarray(target), axis=-1)


def stratified_split(ds: Dataset, eval_frac: float, rng: Stream) -> tuple[Dataset, Dataset]:
    """Split proportionally within each majority class of ``full_dist``.

    Class ``c`` with ``n_c`` members contributes ``floor(eval_frac * n_c + 0.5)``
    examples to the eval side.  If any class has fewer than two members, a
    warning is issued and the split is done globally instead.
    """
    if not 0 < eval_frac < 1:
        raise ConfigurationError("eval_frac must lie strictly between 0 and 1")
    n = len(ds)
    labels = majority_label(ds.full_dist)
    classes, sizes = np.unique(labels, return_counts=True)
    perm = rng.permutation(n)
    if np.any(sizes < 2):
        warnings.warn("a class has fewer than 2 examples; using a global split", DegenerateWarning, stacklevel=2)
        n_eval = int(math.floor(eval_frac * n + 0.5))
        eval_idx = np.sort(perm[:n_eval])
    else:
        shuffled_labels = labels[perm]
        chunks = []
        for c, n_c in zip(classes, sizes):
            members = perm[shuffled_labels == c]
            chunks.append(members[: int(math.floor(eval_frac * n_c + 0.5))])
        eval_idx = np.sort(np.concatenate(chunks))
    mask = np.zeros(n, dtype=bool)
    mask[eval_idx] = True
    train_idx = np.flatnonzero(~mask)
    return ds.subset(train_idx), ds.subset(eval_idx)


def permute_distributions(ds: Dataset, rng: Stream | None = None, perm=None) -> Dataset:
    """Apply one global permutation to the targets (``full_dist`` and ``counts``) only."""
    n = len(ds)
    if n < 2:
        raise InvalidInputError("need at least two examples to permute")
    if perm is None:
        perm = rng.permutation(n)
    perm = np.asarray(perm, dtype=np.int64)
    out = Dataset(
        X=ds.X.copy(),
        full_dist=ds.full_dist[perm],
        counts=None if ds.counts is None else ds.counts[perm],
        true_posterior=ds.true_posterior,
        ids=ds.ids.copy(),
        provenance=dict(ds.provenance),
    )
    out.provenance["target_permutation"] = True
    return out


def high_disagreement_slice(ds: Dataset, quantile: float = 0.25) -> np.ndarray:
    """Indices whose ``full_dist`` entropy reaches the upper ``quantile`` of the dataset."""
    if not 0 < quantile < 1:
        raise ConfigurationError("quantile must lie strictly between 0 and 1")
    H = dist_entropy(ds.full_dist)
    if np.all(H <= 0):
        warnings.warn("all targets are one-hot; high-disagreement slice is empty", DegenerateWarning, stacklevel=2)
        return np.zeros(0, dtype=np.int64)
    threshold = np.quantile(H, 1.0 - quantile)
    if threshold <= 0:
        return np.flatnonzero(H > 0)
    return np.flatnonzero(H >= threshold)


# Text serialization.
#
#   line 1      "# labeldelivery-dataset v1"
#   line 2      "# C=<int> d=<int> N=<int> has_counts=<0|1> seeds=<json>"
#   data lines  id, x_1..x_d, p_1..p_C [, v_1..v_C]   (comma separated)
#
# Floats are written with repr() so a read-back is bit-exact.

_MAGIC = "# labeldelivery-dataset v1"


def write_dataset(ds: Dataset, path) -> None:
    import json

    has_counts = ds.counts is not None
    lines = [
        _MAGIC,
        f"# C={ds.C} d={ds.d} N={len(ds)} has_counts={int(has_counts)} seeds={json.dumps(ds.provenance, sort_keys=True)}",
    ]
    for j in range(len(ds)):
        cols = [str(int(ds.ids[j]))]
        cols += [repr(float(v)) for v in ds.X[j]]
        cols += [repr(float(v)) for v in ds.full_dist[j]]
        if has_counts:
            cols += [str(int(v)) for v in ds.counts[j]]
        lines.append(",".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    import json

    text = Path(path).read_text().splitlines()
    if not text or text[0] != _MAGIC:
        raise InvalidInputError(f"{path}: not a labeldelivery dataset file")
    head = text[1][2:]
    fields_, _, seeds = head.partition(" seeds=")
    meta = dict(kv.split("=") for kv in fields_.split())
    C, d, N, has_counts = int(meta["C"]), int(meta["d"]), int(meta["N"]), meta["has_counts"] == "1"
    rows = [line.split(",") for line in text[2:] if line]
    if len(rows) != N:
        raise InvalidInputError(f"{path}: header says N={N}, found {len(rows)} rows")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1 : 1 + d]] for r in rows]).reshape(N, d)
    P = np.array([[float(v) for v in r[1 + d : 1 + d + C]] for r in rows]).reshape(N, C)
    counts = np.array([[int(v) for v in r[1 + d + C :]] for r in rows], dtype=np.int64).reshape(N, C) if has_counts else None
    return Dataset(X=X, full_dist=P, counts=counts, ids=ids, provenance=json.loads(seeds))
