"""Per-epoch training targets under each label-delivery method.

A :class:`DeliverySchedule` is built once per run from the training split.
It never mutates: SLS labels for epoch ``t`` are drawn from the stream keyed
by the first epoch of ``t``'s hold block, so they can be recomputed on demand
and are constant on every block ``[j*h, (j+1)*h)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, majority_label, permute_distributions
from .errors import ConfigurationError, InvalidInputError
from .rng import Stream, stream

METHODS = (
    "soft",
    "multipass",
    "deterministic_control",
    "sls",
    "shuffled_sls",
    "majority",
    "label_smoothing",
    "mixup",
)
HARD_METHODS = ("multipass", "deterministic_control", "sls", "shuffled_sls", "majority")
CONTROL_SEED_OFFSET = 1000


@dataclass(frozen=True)
class TrainingTarget:
    hard: int | None = None
    soft: np.ndarray | None = None

    def __post_init__(self):
        if (self.hard is None) == (self.soft is None):
            raise InvalidInputError("a training target is either hard or soft, not both")


class DeliverySchedule:
    def __init__(
        self,
        method: str,
        targets: np.ndarray,
        seed: int,
        sequences: np.ndarray | None = None,
        lengths: np.ndarray | None = None,
        hold_period: int = 1,
        smoothing_alpha: float = 0.1,
        mixup_alpha: float = 0.2,
    ):
        if method not in METHODS:
            raise ConfigurationError(f"unknown delivery method {method!r}")
        if hold_period < 1:
            raise ConfigurationError("hold_period must be at least 1")
        self.method = method
        self.targets = targets
        self.seed = seed
        self.sequences = sequences
        self.lengths = lengths
        self.hold_period = hold_period
        self.smoothing_alpha = smoothing_alpha
        self.mixup_alpha = mixup_alpha
        self._sls_cache: tuple[int, np.ndarray] | None = None

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def C(self) -> int:
        return self.targets.shape[1]

    def sequence(self, i: int) -> np.ndarray:
        return self.sequences[i, : self.lengths[i]]

    def sls_labels(self, epoch: int) -> np.ndarray:
        block = epoch - epoch % self.hold_period
        if self._sls_cache is None or self._sls_cache[0] != block:
            labels = stream(self.seed, "sls_epoch", block).categorical_rows(self.targets)
            self._sls_cache = (block, labels)
        return self._sls_cache[1]

    def epoch_targets(self, epoch: int) -> np.ndarray:
        """Targets for all examples at ``epoch``: labels ``(N,)`` or weights ``(N, C)``."""
        if epoch < 0:
            raise InvalidInputError("epoch must be non-negative")
        m = self.method
        if m in ("soft", "mixup"):
            return self.targets
        if m in ("multipass", "deterministic_control"):
            return self.sequences[np.arange(self.n), epoch % self.lengths]
        if m in ("sls", "shuffled_sls"):
            return self.sls_labels(epoch)
        y = majority_label(self.targets)
        if m == "majority":
            return y
        T = np.full((self.n, self.C), self.smoothing_alpha / self.C)
        T[np.arange(self.n), y] += 1.0 - self.smoothing_alpha
        return T

    def target_at(self, i: int, epoch: int) -> TrainingTarget:
        t = self.epoch_targets(epoch)[i]
        if np.ndim(t) == 0:
            return TrainingTarget(hard=int(t))
        return TrainingTarget(soft=np.array(t))


def _multipass_sequences(ds: Dataset, seed: int):
    if ds.counts is None:
        raise ConfigurationError("multipass delivery needs vote counts")
    lengths = ds.counts.sum(axis=1)
    seqs = np.zeros((len(ds), int(lengths.max())), dtype=np.int64)
    for j, i in enumerate(ds.ids):
        votes = np.repeat(np.arange(ds.C), ds.counts[j])
        seqs[j, : votes.size] = votes[stream(seed, "multipass_shuffle", int(i)).permutation(votes.size)]
    return seqs, lengths


def build_multipass(ds: Dataset, seed: int) -> DeliverySchedule:
    """Expand each vote vector and shuffle it once with the example's own stream."""
    seqs, lengths = _multipass_sequences(ds, seed)
    return DeliverySchedule("multipass", ds.target(), seed, seqs, lengths)


def build_deterministic_control(ds: Dataset, seed: int) -> DeliverySchedule:
    seqs, lengths = _multipass_sequences(ds, seed + CONTROL_SEED_OFFSET)
    return DeliverySchedule("deterministic_control", ds.target(), seed, seqs, lengths)


def build_schedule(
    ds: Dataset,
    method: str,
    seed: int,
    hold_period: int = 1,
    smoothing_alpha: float = 0.1,
    mixup_alpha: float = 0.2,
) -> DeliverySchedule:
    """Build the schedule for any method from a training split.

    ``shuffled_sls`` permutes the targets across examples with the
    ``(seed, "permute")`` stream first.
    """
    if method == "multipass":
        return build_multipass(ds, seed)
    if method == "deterministic_control":
        return build_deterministic_control(ds, seed)
    if method == "shuffled_sls":
        ds = permute_distributions(ds, stream(seed, "permute"))
    if method not in METHODS:
        raise ConfigurationError(f"unknown delivery method {method!r}")
    return DeliverySchedule(
        method,
        ds.target(),
        seed,
        hold_period=hold_period,
        smoothing_alpha=smoothing_alpha,
        mixup_alpha=mixup_alpha,
    )


def mixup_batch(X, T, alpha: float, rng: Stream, lam: float | None = None):
    """Convex-combine each row with a random partner: ``lam * a + (1 - lam) * b``.

    One ``lam ~ Beta(alpha, alpha)`` per batch unless ``lam`` is given.
    Returns ``(X_mixed, T_mixed, lam)``.
    """
    if alpha <= 0:
        raise ConfigurationError("mixup alpha must be positive")
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if X.shape[0] < 2:
        return X, T, 1.0
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    partner = rng.permutation(X.shape[0])
    return lam * X + (1.0 - lam) * X[partner], lam * T + (1.0 - lam) * T[partner], lam
