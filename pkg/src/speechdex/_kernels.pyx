# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: nearest-centroid scan, word-level edit distance,
and the fused GELU backward (pure polynomial given the saved tanh values).

Forward GELU and softmax stay in numpy on both backends: their cost is the
transcendental, and numpy's SIMD tanh/exp beat a scalar libm loop. Each
function here is mirrored in numpy by speechdex.backend, which picks an
implementation at import time.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double

# tanh-form GELU constants
cdef double GELU_C = 0.7978845608028654      # sqrt(2/pi)
cdef double GELU_A = 0.044715


def assign_nearest(floating[:, ::1] points, floating[:, ::1] centroids):
    """Nearest centroid per row of `points` (squared Euclidean, lowest index wins ties).

    Returns (indices int64[n], squared distances float64[n]). Distances are
    accumulated in double regardless of input dtype.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out_idx = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_dist = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = out_idx
    cdef double[::1] dist = out_dist
    cdef Py_ssize_t i, j, d
    cdef double best, acc, diff
    cdef Py_ssize_t best_j
    for i in range(n):
        best = -1.0
        best_j = 0
        for j in range(k):
            acc = 0.0
            for d in range(dim):
                diff = points[i, d] - centroids[j, d]
                acc += diff * diff
            if best < 0.0 or acc < best:
                best = acc
                best_j = j
        idx[i] = best_j
        dist[i] = best
    return out_idx, out_dist


def levenshtein_ids(cnp.int32_t[::1] a, cnp.int32_t[::1] b):
    """Edit distance between two id sequences (unit costs)."""
    cdef Py_ssize_t la = a.shape[0]
    cdef Py_ssize_t lb = b.shape[0]
    if la == 0:
        return lb
    if lb == 0:
        return la
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev_arr = np.arange(lb + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur_arr = np.empty(lb + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    cdef Py_ssize_t i, j
    cdef cnp.int64_t cost, best
    for i in range(1, la + 1):
        cur[0] = i
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[lb])


def gelu_bwd(floating[::1] x, floating[::1] t, floating[::1] g):
    """Gradient of tanh-form GELU in one fused pass over the saved tanh."""
    cdef Py_ssize_t n = x.shape[0]
    if floating is float:
        out_arr = np.empty(n, dtype=np.float32)
    else:
        out_arr = np.empty(n, dtype=np.float64)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double xi, ti, local
    for i in range(n):
        xi = x[i]
        ti = t[i]
        local = 0.5 * (1.0 + ti) \
            + 0.5 * xi * (1.0 - ti * ti) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = <floating> (local * g[i])
    return out_arr
