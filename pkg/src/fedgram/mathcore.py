"""Numerical kernel shared by every other module.

Vectors are 1-D float64 numpy arrays, matrices are 2-D float64 arrays and a
list of vectors is accepted anywhere a stack is expected.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

__all__ = [
    "frobenius_norm",
    "normalize_rows",
    "std_normal_cdf",
    "std_normal_inverse_cdf",
    "coordinate_trimmed_mean",
    "coordinate_median",
    "geometric_median",
    "weiszfeld_objective",
    "rng_stream",
]


def _stack(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("empty input")
    return arr


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty input")
    return float(math.sqrt(np.sum(m * m)))


def normalize_rows(m) -> np.ndarray:
    """Scale every row of ``m`` to unit Euclidean length.

    Raises ``ValueError("degenerate embedding")`` if any row is all zeros.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("empty input")
    norms = np.sqrt(np.sum(m * m, axis=1))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("degenerate embedding")
    return m / norms[:, None]


def std_normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


# Acklam's rational approximation (relative error ~1.15e-9 before refinement).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def std_normal_inverse_cdf(p: float) -> float:
    """Return z with Phi(z) = p.

    Acklam's approximation followed by one Halley step on the erfc-based CDF.
    The lower tail is evaluated directly and the upper tail by reflection,
    which makes the function exactly antisymmetric about p = 0.5.
    """
    p = float(p)
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise ValueError("probability out of range")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -std_normal_inverse_cdf(1.0 - p)
    x = _acklam(p)
    e = std_normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def coordinate_trimmed_mean(vectors, k: int) -> np.ndarray:
    """Drop the ``k`` largest and ``k`` smallest values per coordinate, average the rest."""
    arr = _stack(vectors)
    n = arr.shape[0]
    if k < 0:
        raise ValueError("k must be non-negative")
    if 2 * k >= n:
        raise ValueError("over-trimmed")
    if k == 0:
        return arr.mean(axis=0)
    srt = np.sort(arr, axis=0)
    return srt[k:n - k].mean(axis=0)


def coordinate_median(vectors) -> np.ndarray:
    arr = _stack(vectors)
    # np.median averages the two central values for even counts.
    return np.median(arr, axis=0)


def weiszfeld_objective(v, points, weights) -> float:
    pts = _stack(points)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sum(w * np.linalg.norm(pts - np.asarray(v, dtype=np.float64), axis=1)))


def geometric_median(
    points,
    weights: Sequence[float] | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    smoothing: float = 1e-6,
    trace: list | None = None,
) -> np.ndarray:
    """Smoothed Weiszfeld iteration for the weighted geometric median.

    Distances in the reweighting step are floored at ``smoothing``. Starts at
    the weighted mean and stops once the step is shorter than ``tol``. If
    ``trace`` is a list, the objective value after each iterate is appended.
    """
    pts = _stack(points)
    n = pts.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError("weights must match number of points")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
    if tol <= 0 or smoothing <= 0:
        raise ValueError("tol and smoothing must be positive")
    w = w / w.sum()
    v = w @ pts
    if trace is not None:
        trace.append(weiszfeld_objective(v, pts, w))
    for _ in range(max_iter):
        dist = np.linalg.norm(pts - v, axis=1)
        beta = w / np.maximum(dist, smoothing)
        new_v = (beta @ pts) / beta.sum()
        step = float(np.linalg.norm(new_v - v))
        v = new_v
        if trace is not None:
            trace.append(weiszfeld_objective(v, pts, w))
        if step < tol:
            break
    return v


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("stream ids must be non-negative")
        return int(tag)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(seed: int, *stream_id) -> np.random.Generator:
    """Independent generator for ``(seed, *stream_id)``.

    Streams are derived through ``SeedSequence`` spawn keys, so a stream's
    draws depend only on its identity and never on the order in which other
    streams were created. String tags are hashed to 64-bit keys.
    """
    key = tuple(_tag_int(t) for t in stream_id)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
