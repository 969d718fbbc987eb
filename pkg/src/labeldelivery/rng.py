"""Named, deterministic random streams.

Every stochastic choice in the package draws from a :class:`Stream` built
from a :class:`StreamKey` ``(seed, tag, index)``.  The key is folded into a
128-bit Philox key by a pinned mixing function, so a stream can be rebuilt
anywhere from its key alone, with no shared generator state.

Mixing algorithm (pinned for bit-reproducibility)::

    t  = fnv1a64(tag.encode("utf-8"))
    h1 = splitmix64(splitmix64(splitmix64(seed) ^ t) ^ index)
    h2 = splitmix64(h1 ^ 0xD1B54A32D192ED03)
    philox_key = h1 | (h2 << 64)

All arithmetic is modulo 2**64.  ``seed`` and ``index`` are reduced modulo
2**64 first, so negative values are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# Purpose tags used across the package.
TAGS = (
    "centers",
    "features",
    "votes",
    "split",
    "subsample",
    "multipass_shuffle",
    "sls_epoch",
    "init",
    "batch_order",
    "mixup",
    "permute",
    "probe",
    "power_iter",
    "gradvar",
    "ood_far",
    "ood_near",
    "prop1",
    "prop1_draws",
    "prop1_param",
    "objective",
    "objective_labels",
)


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 output function."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class StreamKey:
    seed: int
    tag: str
    index: int = 0

    def philox_key(self) -> int:
        t = fnv1a64(self.tag.encode("utf-8"))
        h1 = splitmix64(splitmix64(splitmix64(self.seed & MASK64) ^ t) ^ (self.index & MASK64))
        h2 = splitmix64(h1 ^ 0xD1B54A32D192ED03)
        return h1 | (h2 << 64)


class Stream:
    """A stateful random stream owned by a single consumer.

    Thin wrapper over a Philox-backed :class:`numpy.random.Generator` that
    adds the sampling primitives whose exact algorithm the package pins:
    inverse-CDF categorical draws and multinomials built from them.
    """

    def __init__(self, key: StreamKey):
        self.key = key
        self.bit_generator = np.random.Philox(key=key.philox_key())
        self.gen = np.random.Generator(self.bit_generator)

    def uint64(self, size=None):
        return self.bit_generator.random_raw(size)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def rademacher(self, size):
        return np.where(self.gen.random(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def categorical(self, p, size=None):
        """Inverse-CDF draws from one probability vector.

        The cumulative sum runs in increasing class order; a uniform ``u`` maps
        to the smallest class ``k`` with ``u < cumsum(p)[k]``.
        """
        p = np.asarray(p, dtype=np.float64)
        u = self.gen.random(size)
        return _inverse_cdf(np.cumsum(p), u, _last_support(p))

    def categorical_rows(self, P) -> np.ndarray:
        """One inverse-CDF draw per row of the ``(N, C)`` matrix ``P``."""
        P = np.asarray(P, dtype=np.float64)
        u = self.gen.random(P.shape[0])
        cum = np.cumsum(P, axis=1)
        labels = (cum <= u[:, None]).sum(axis=1)
        last = P.shape[1] - 1 - np.argmax(P[:, ::-1] > 0, axis=1)
        return np.minimum(labels, last)

    def multinomial(self, K: int, p) -> np.ndarray:
        """``K`` categorical draws from ``p`` aggregated into counts."""
        p = np.asarray(p, dtype=np.float64)
        draws = self.categorical(p, size=K)
        return np.bincount(draws, minlength=p.shape[0]).astype(np.int64)


def _last_support(p: np.ndarray) -> int:
    nz = np.flatnonzero(p > 0)
    return int(nz[-1]) if nz.size else p.shape[0] - 1


def _inverse_cdf(cum: np.ndarray, u, last: int):
    labels = np.searchsorted(cum, u, side="right")
    return np.minimum(labels, last)


def stream(seed: int, tag: str, index: int = 0) -> Stream:
    return Stream(StreamKey(int(seed), tag, int(index)))
