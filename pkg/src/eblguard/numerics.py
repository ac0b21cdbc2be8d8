"""Deterministic small-tensor numerics shared by every trainable module.

All math runs in 64-bit floats. Vectors and matrices are plain numpy
float64 arrays; helpers here enforce the invariants (finiteness, unit
norms) the rest of the package relies on.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's Philox
counter-based bit generator. Philox is keyed, splittable and produces the
same stream on every platform, which is what makes the acceptance tests
byte-reproducible.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import LengthMismatchError, NonFiniteError, ZeroNormError

NORM_EPS = 1e-12


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array and check finiteness."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise LengthMismatchError(f"{name} must be a non-empty 1-D array")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction.

    Raises ZeroNormError when the norm is at or below 1e-12; anything that
    small has no trustworthy direction in 64-bit arithmetic.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm <= NORM_EPS:
        raise ZeroNormError(f"cannot normalize vector with norm {norm:.3e}")
    return arr / norm


def cosine_sim(a, b) -> float:
    """Cosine similarity clamped to [-1, 1].

    The clamp absorbs rounding so downstream arccos never sees 1 + 1e-16.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise LengthMismatchError(f"length mismatch: {va.size} vs {vb.size}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ZeroNormError("cosine similarity of a near-zero vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def finite_diff_grad(fcn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one call per side.

    The step must sit in [1e-7, 1e-3]: smaller drowns in rounding error,
    larger loses the quadratic truncation bound the tests rely on.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x0 = as_vector(x, "x")
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(fcn(xp))
        fm = float(fcn(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Worst-case relative error between two gradient arrays.

    The floor keeps near-zero entries from dominating the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


class Rng:
    """Seeded, splittable, counter-based random generator.

    A fixed Philox4x64 keyed by ``(seed, stream)``; equal keys give
    byte-identical streams on every platform. Instances are single-owner:
    never share one mutably across threads, split instead.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self.gen = np.random.Generator(self._bitgen)

    def split(self, stream: int) -> "Rng":
        """Independent child stream; deterministic in (seed, stream)."""
        return Rng(self.seed, stream)

    def raw_u64(self, n: int) -> np.ndarray:
        """Raw Philox words; the layer the golden determinism test pins."""
        return self.gen.integers(0, 2**64, size=n, dtype=np.uint64)

    def normal(self, size=None, scale: float = 1.0):
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream={self.stream})"
