"""Random Fourier feature maps ``x -> sqrt(2) cos(omega * x + phase)``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sgfd._errors import InvalidArgument

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class RffFeatureMap:
    """``M`` cosine features with standard-normal frequencies and uniform phases."""

    omegas: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omegas, dtype=float).ravel()
        ph = np.asarray(self.phases, dtype=float).ravel()
        if om.shape != ph.shape or om.size == 0:
            raise InvalidArgument("omegas and phases must be non-empty and equal length")
        if np.any(ph < 0) or np.any(ph >= 2 * math.pi):
            raise InvalidArgument("phases must lie in [0, 2*pi)")
        om.setflags(write=False)
        ph.setflags(write=False)
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "phases", ph)

    @property
    def M(self):
        return self.omegas.size

    def __call__(self, x):
        return rff_apply(self, x)

    def to_dict(self):
        return {"omegas": [float(v) for v in self.omegas],
                "phases": [float(v) for v in self.phases]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["omegas"], dtype=float), np.array(d["phases"], dtype=float))


def rff_sample(M, seed=None):
    """Draw a map with ``omega ~ N(0, 1)`` and ``phase ~ U[0, 2*pi)``."""
    if int(M) != M or M < 1:
        raise InvalidArgument(f"M must be a positive integer, got {M}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    omegas = rng.standard_normal(int(M))
    phases = rng.uniform(0.0, 2 * math.pi, size=int(M))
    return RffFeatureMap(omegas, phases)


def rff_apply(fmap, x):
    """Map values to features.

    A scalar gives an ``(M,)`` vector; an ``(n,)`` column gives ``(n, M)``.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("rff_apply input must be finite")
    return SQRT2 * np.cos(np.multiply.outer(x, fmap.omegas) + fmap.phases)


def sample_maps(d, M, seed=None):
    """One independent map per feature column."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [rff_sample(M, rng) for _ in range(d)]


def apply_maps(maps, X):
    """Stack per-column features into an ``(n, d, M)`` array."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(maps):
        raise InvalidArgument("need one map per column")
    if not np.all(np.isfinite(X)):
        raise InvalidArgument("rff input must be finite")
    M = maps[0].M
    if any(m.M != M for m in maps):
        raise InvalidArgument("all maps must share M")
    omegas = np.stack([m.omegas for m in maps])
    phases = np.stack([m.phases for m in maps])
    return SQRT2 * np.cos(X[:, :, None] * omegas[None] + phases[None])
