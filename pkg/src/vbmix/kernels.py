"""Voxel-loop kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time: numba is used when it imports
cleanly and the environment variable ``VBMIX_NUMBA`` is not set to ``0``.
Both implementations stay importable so they can be compared directly
(see ``benchmarks/bench_kernels.py``).
"""
from __future__ import annotations

import os

import numpy as np
from scipy.special import logsumexp


def quad_form_numpy(R, P):
    """Row-wise ``r^T P r`` for ``R`` of shape ``(n, p)``."""
    return np.einsum("ni,ij,nj->n", R, P, R)


def weighted_moments_numpy(X, w):
    """``(sum w, sum w x, sum w x x^T)`` over the rows of ``X``."""
    Xw = X * w[:, None]
    return w.sum(), Xw.sum(axis=0), Xw.T @ X


def normalize_log_rows_numpy(logp):
    """Softmax of each row of ``logp``; also returns the row log-normalizers."""
    lse = logsumexp(logp, axis=1)
    return np.exp(logp - lse[:, None]), lse


try:
    if os.environ.get("VBMIX_NUMBA", "1") == "0":
        raise ImportError("numba disabled by VBMIX_NUMBA=0")
    from numba import njit
except ImportError:
    njit = None


if njit is not None:

    @njit(cache=True)
    def quad_form_numba(R, P):
        n, p = R.shape
        out = np.empty(n)
        for d in range(n):
            acc = 0.0
            for i in range(p):
                ri = R[d, i]
                row = 0.0
                for j in range(p):
                    row += P[i, j] * R[d, j]
                acc += ri * row
            out[d] = acc
        return out

    @njit(cache=True)
    def weighted_moments_numba(X, w):
        n, p = X.shape
        s0 = 0.0
        s1 = np.zeros(p)
        s2 = np.zeros((p, p))
        for d in range(n):
            wd = w[d]
            s0 += wd
            for i in range(p):
                wx = wd * X[d, i]
                s1[i] += wx
                for j in range(i + 1):
                    s2[i, j] += wx * X[d, j]
        for i in range(p):
            for j in range(i):
                s2[j, i] = s2[i, j]
        return s0, s1, s2

    @njit(cache=True)
    def normalize_log_rows_numba(logp):
        n, K = logp.shape
        out = np.empty((n, K))
        lse = np.empty(n)
        for d in range(n):
            mx = logp[d, 0]
            for k in range(1, K):
                if logp[d, k] > mx:
                    mx = logp[d, k]
            acc = 0.0
            for k in range(K):
                out[d, k] = np.exp(logp[d, k] - mx)
                acc += out[d, k]
            for k in range(K):
                out[d, k] /= acc
            lse[d] = mx + np.log(acc)
        return out, lse

    BACKEND = "numba"
    quad_form = quad_form_numba
    weighted_moments = weighted_moments_numba
    normalize_log_rows = normalize_log_rows_numba
else:
    BACKEND = "numpy"
    quad_form = quad_form_numpy
    weighted_moments = weighted_moments_numpy
    normalize_log_rows = normalize_log_rows_numpy
