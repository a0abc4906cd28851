"""Uniform box priors and the logit reparameterization used by the flow.

The flow lives in an unconstrained space ``z``; simulator inputs ``x`` live in
per-dimension boxes ``[lo, hi]``. The map between them is

    z = logit((x - lo) / (hi - lo)),    x = lo + (hi - lo) * sigmoid(z)

so anything sampled in ``z`` lands inside the box by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logit

EPSILON_CLIP = 1e-6


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Named per-dimension ranges of a uniform prior."""

    names: tuple
    lo: np.ndarray
    hi: np.ndarray
    epsilon_clip: float = EPSILON_CLIP

    def __init__(self, names: Sequence[str], lo, hi, epsilon_clip: float = EPSILON_CLIP):
        lo = np.asarray(lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(hi, dtype=np.float64).reshape(-1)
        names = tuple(str(n) for n in names)
        if not (len(names) == lo.size == hi.size):
            raise ValueError(f"names/lo/hi lengths differ: {len(names)}, {lo.size}, {hi.size}")
        if len(names) == 0:
            raise ValueError("a prior needs at least one dimension")
        bad = np.flatnonzero(~(lo < hi))
        if bad.size:
            raise ValueError(f"lo must be < hi; violated for {[names[i] for i in bad]}")
        if not 0.0 < epsilon_clip < 0.5:
            raise ValueError("epsilon_clip must lie in (0, 0.5)")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "epsilon_clip", float(epsilon_clip))

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def same_ranges(self, other: "PriorSpec") -> bool:
        return (
            self.names == other.names
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + self.width * rng.random((n, self.dim))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "lo": [float(v) for v in self.lo],
            "hi": [float(v) for v in self.hi],
            "epsilon_clip": self.epsilon_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(d["names"], d["lo"], d["hi"], d.get("epsilon_clip", EPSILON_CLIP))


def _as_2d(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != dim:
        raise ValueError(f"expected {dim} columns, got shape {arr.shape}")
    return arr, single


def to_unbounded(x, spec: PriorSpec) -> np.ndarray:
    """Map bounded points (n, d) or (d,) to the flow's unconstrained space."""
    arr, single = _as_2d(x, spec.dim)
    u = (arr - spec.lo) / spec.width
    eps = spec.epsilon_clip
    outside = (u < -eps) | (u > 1.0 + eps) | ~np.isfinite(u)
    if outside.any():
        row, col = np.argwhere(outside)[0]
        raise OutOfRangeError(
            f"dimension {spec.names[col]!r} value {arr[row, col]!r} outside "
            f"[{spec.lo[col]!r}, {spec.hi[col]!r}]"
        )
    z = logit(np.clip(u, eps, 1.0 - eps))
    return z[0] if single else z


def to_bounded(z, spec: PriorSpec) -> np.ndarray:
    arr, single = _as_2d(z, spec.dim)
    x = spec.lo + spec.width * expit(arr)
    # rounding can land exactly on a bound for |z| large
    x = np.minimum(np.maximum(x, spec.lo), spec.hi)
    return x[0] if single else x


def log_prior_unbounded(z, spec: PriorSpec | None = None) -> np.ndarray:
    """Log-density of the uniform prior pushed through ``to_unbounded``.

    The box widths cancel, so ``spec`` only fixes the dimension check.
    Returns shape (n,) for (n, d) input, or a float for a single point.
    """
    arr = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if spec is not None and arr.shape[1] != spec.dim:
        raise ValueError(f"expected {spec.dim} columns, got shape {arr.shape}")
    out = np.sum(log_expit(arr) + log_expit(-arr), axis=1)
    return float(out[0]) if np.ndim(z) == 1 else out


def log_jacobian_to_unbounded(z, spec: PriorSpec) -> np.ndarray:
    """log |dz/dx| at the bounded point whose image is ``z``; shape (n,)."""
    arr = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return -np.sum(np.log(spec.width)) - np.sum(log_expit(arr) + log_expit(-arr), axis=1)
