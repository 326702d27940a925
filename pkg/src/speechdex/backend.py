"""Kernel selection: compiled Cython kernels when available, numpy otherwise.

The compiled extension carries the kernels where a tight C loop beats
numpy: the nearest-centroid scan, the Levenshtein DP, and the fused GELU
backward. GELU forward and row softmax are numpy on both paths because
their cost is the transcendental and numpy's SIMD tanh/exp outrun a
scalar libm loop.

Set SPEECHDEX_PURE=1 to force the numpy implementations even when the
extension is built. Both implementations stay importable side by side
(PURE / COMPILED) so tests and benchmarks can compare them; ordinary code
goes through the module-level functions, which dispatch to ACTIVE.
"""

import os

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    """tanh-form GELU. Returns (y, t) with the tanh values saved for backward."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    y = 0.5 * x * (1.0 + t)
    return y.astype(x.dtype, copy=False), t.astype(x.dtype, copy=False)


def softmax_rows(x):
    """Row softmax over the last axis of a 2-D array, max-subtracted."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class _PureKernels:
    """Numpy reference implementations of the compiled kernels."""

    name = "pure"

    # points are scanned against centroids in chunks so the (chunk, k, dim)
    # difference tensor stays small; float64 keeps the exact-distance
    # tie-break identical to the compiled loop.
    @staticmethod
    def assign_nearest(points, centroids, chunk=256):
        n = points.shape[0]
        idx = np.empty(n, dtype=np.int64)
        dist = np.empty(n, dtype=np.float64)
        c64 = centroids.astype(np.float64, copy=False)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            diff = points[lo:hi, None, :].astype(np.float64) - c64[None, :, :]
            d2 = np.einsum("nkd,nkd->nk", diff, diff)
            idx[lo:hi] = np.argmin(d2, axis=1)
            dist[lo:hi] = d2[np.arange(hi - lo), idx[lo:hi]]
        return idx, dist

    @staticmethod
    def levenshtein_ids(a, b):
        la, lb = len(a), len(b)
        if la == 0:
            return lb
        if lb == 0:
            return la
        prev = list(range(lb + 1))
        for i in range(1, la + 1):
            cur = [i] + [0] * lb
            ai = a[i - 1]
            for j in range(1, lb + 1):
                cost = 0 if ai == b[j - 1] else 1
                cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
            prev = cur
        return prev[lb]

    @staticmethod
    def gelu_bwd(x, t, g):
        local = 0.5 * (1.0 + t) \
            + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (local * g).astype(x.dtype, copy=False)


class _CompiledKernels:
    """Thin wrappers ensuring dtype/contiguity before calling the extension."""

    name = "compiled"

    def __init__(self, ext):
        self._ext = ext

    def assign_nearest(self, points, centroids):
        dt = np.result_type(points.dtype, centroids.dtype, np.float32)
        if dt not in (np.float32, np.float64):
            dt = np.float64
        return self._ext.assign_nearest(
            np.ascontiguousarray(points, dtype=dt),
            np.ascontiguousarray(centroids, dtype=dt))

    def levenshtein_ids(self, a, b):
        return self._ext.levenshtein_ids(
            np.ascontiguousarray(a, dtype=np.int32),
            np.ascontiguousarray(b, dtype=np.int32))

    def gelu_bwd(self, x, t, g):
        out = self._ext.gelu_bwd(
            np.ascontiguousarray(x.ravel()),
            np.ascontiguousarray(t.ravel()),
            np.ascontiguousarray(g.ravel()))
        return out.reshape(x.shape)


PURE = _PureKernels()

try:
    from speechdex import _kernels as _ext
    COMPILED = _CompiledKernels(_ext)
    HAVE_COMPILED = True
except ImportError:
    COMPILED = None
    HAVE_COMPILED = False

if HAVE_COMPILED and os.environ.get("SPEECHDEX_PURE", "") != "1":
    ACTIVE = COMPILED
else:
    ACTIVE = PURE


def assign_nearest(points, centroids):
    return ACTIVE.assign_nearest(points, centroids)


def levenshtein_ids(a, b):
    return ACTIVE.levenshtein_ids(a, b)


def gelu_bwd(x, t, g):
    return ACTIVE.gelu_bwd(x, t, g)
