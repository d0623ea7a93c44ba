"""Compiled dense kernels for the N x M cloud/vertex interactions.

Each kernel works row by row (one cloud point at a time) and writes
per-row results only, so the output does not depend on the thread count.
Exponentials whose argument is below the double underflow limit are
skipped; ``exp`` would return exactly 0.0 for them anyway.
"""

from __future__ import annotations

import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; skip it instead of warning
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# exp(-x) is exactly 0.0 in double precision for x above this
_UNDERFLOW = 745.2


@njit(cache=True, parallel=True)
def sqdist_into(a, b, out):
    for n in prange(a.shape[0]):
        ax, ay, az = a[n, 0], a[n, 1], a[n, 2]
        for m in range(b.shape[0]):
            dx = ax - b[m, 0]
            dy = ay - b[m, 1]
            dz = az - b[m, 2]
            out[n, m] = dx * dx + dy * dy + dz * dz


@njit(cache=True, parallel=True)
def posterior_into(d2, inv2s, log_c, resp, rowsum):
    """resp[n, m] = exp(-d2 * inv2s) / (sum_m exp(-d2 * inv2s) + exp(log_c)),
    stabilised by the row minimum."""
    n_model = d2.shape[1]
    for n in prange(d2.shape[0]):
        dmin = np.inf
        for m in range(n_model):
            if d2[n, m] < dmin:
                dmin = d2[n, m]
        total = 0.0
        for m in range(n_model):
            t = (d2[n, m] - dmin) * inv2s
            e = np.exp(-t) if t < _UNDERFLOW else 0.0
            resp[n, m] = e
            total += e
        # log of the full denominator, shifted by the row minimum
        shifted = np.log(total)
        log_den = np.logaddexp(shifted, log_c + dmin * inv2s)
        if not np.isfinite(log_den):
            scale = 0.0
        else:
            scale = np.exp(-log_den)
        acc = 0.0
        for m in range(n_model):
            r = resp[n, m] * scale
            resp[n, m] = r
            acc += r
        rowsum[n] = acc


@njit(cache=True, parallel=True)
def row_logsumexp(d2, inv2s, out):
    """out[n] = log(sum_m exp(-d2[n, m] * inv2s))."""
    n_model = d2.shape[1]
    for n in prange(d2.shape[0]):
        dmin = np.inf
        for m in range(n_model):
            if d2[n, m] < dmin:
                dmin = d2[n, m]
        total = 0.0
        for m in range(n_model):
            t = (d2[n, m] - dmin) * inv2s
            if t < _UNDERFLOW:
                total += np.exp(-t)
        out[n] = np.log(total) - dmin * inv2s


@njit(cache=True, parallel=True)
def row_weighted_sum(w, d2, out):
    """out[n] = sum_m w[n, m] * d2[n, m]."""
    for n in prange(w.shape[0]):
        acc = 0.0
        for m in range(w.shape[1]):
            acc += w[n, m] * d2[n, m]
        out[n] = acc
