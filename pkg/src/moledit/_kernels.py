"""Fused elementwise kernels for the encoder's hot paths.

Each kernel parallelises over independent rows only, so results are
bitwise deterministic regardless of thread scheduling. Pure-numpy
fallbacks keep the package importable without numba.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard speedup, soft dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

    prange = range

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(parallel=True, cache=True)
def _gelu_fwd_nb(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    cdf = np.empty_like(x)
    for i in prange(rows):
        for j in range(cols):
            c = 0.5 * (1.0 + math.erf(x[i, j] * _INV_SQRT2))
            cdf[i, j] = c
            y[i, j] = x[i, j] * c
    return y, cdf


@njit(parallel=True, cache=True)
def _gelu_bwd_nb(x, cdf, dout):
    rows, cols = x.shape
    dx = np.empty_like(x)
    for i in prange(rows):
        for j in range(cols):
            v = x[i, j]
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            dx[i, j] = dout[i, j] * (cdf[i, j] + v * pdf)
    return dx


@njit(parallel=True, cache=True)
def _ln_fwd_nb(x, g, b, eps):
    rows, cols = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(rows, dtype=x.dtype)
    for i in prange(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        iv = 1.0 / math.sqrt(var + eps)
        inv[i] = iv
        for j in range(cols):
            h = (x[i, j] - mu) * iv
            xhat[i, j] = h
            y[i, j] = h * g[j] + b[j]
    return y, xhat, inv


@njit(parallel=True, cache=True)
def _ln_bwd_dx_nb(dy, g, xhat, inv):
    rows, cols = dy.shape
    dx = np.empty_like(dy)
    for i in prange(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            dh = dy[i, j] * g[j]
            m1 += dh
            m2 += dh * xhat[i, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            dh = dy[i, j] * g[j]
            dx[i, j] = inv[i] * (dh - m1 - xhat[i, j] * m2)
    return dx


@njit(parallel=True, cache=True)
def _softmax_rows_nb(z):
    rows, cols = z.shape
    p = np.empty_like(z)
    for i in prange(rows):
        m = z[i, 0]
        for j in range(1, cols):
            if z[i, j] > m:
                m = z[i, j]
        total = 0.0
        for j in range(cols):
            e = math.exp(z[i, j] - m)
            p[i, j] = e
            total += e
        for j in range(cols):
            p[i, j] /= total
    return p


@njit(parallel=True, cache=True)
def _softmax_bwd_rows_nb(p, dp):
    rows, cols = p.shape
    dz = np.empty_like(p)
    for i in prange(rows):
        dot = 0.0
        for j in range(cols):
            dot += dp[i, j] * p[i, j]
        for j in range(cols):
            dz[i, j] = p[i, j] * (dp[i, j] - dot)
    return dz


@njit(cache=True)
def _lcs_suffix_nb(a, b):
    na = a.shape[0]
    nb = b.shape[0]
    table = np.zeros((na + 1, nb + 1), dtype=np.int32)
    for i in range(na - 1, -1, -1):
        for j in range(nb - 1, -1, -1):
            if a[i] == b[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                x = table[i + 1, j]
                y = table[i, j + 1]
                table[i, j] = x if x >= y else y
    return table


def lcs_suffix_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Suffix LCS-length table for two int arrays."""
    if HAVE_NUMBA:
        return _lcs_suffix_nb(a, b)
    na, nb = len(a), len(b)
    table = np.zeros((na + 1, nb + 1), dtype=np.int32)
    for i in range(na - 1, -1, -1):
        for j in range(nb - 1, -1, -1):
            if a[i] == b[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                table[i, j] = max(table[i + 1, j], table[i, j + 1])
    return table


def _as2d(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu_fwd(x):
    if HAVE_NUMBA:
        y, cdf = _gelu_fwd_nb(_as2d(x))
        return y.reshape(x.shape), cdf.reshape(x.shape)
    c = 0.5 * (1.0 + np.vectorize(math.erf)(x * _INV_SQRT2))
    return x * c, c


def gelu_bwd(x, cdf, dout):
    if HAVE_NUMBA:
        return _gelu_bwd_nb(_as2d(x), _as2d(cdf), _as2d(dout)).reshape(x.shape)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dout * (cdf + x * pdf)


def ln_fwd(x, g, b, eps):
    if HAVE_NUMBA:
        y, xhat, inv = _ln_fwd_nb(_as2d(x), g, b, eps)
        return y.reshape(x.shape), xhat.reshape(x.shape), inv.reshape(x.shape[:-1])
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, xhat, inv[..., 0]


def ln_bwd_dx(dy, g, xhat, inv):
    if HAVE_NUMBA:
        return _ln_bwd_dx_nb(_as2d(dy), g, _as2d(xhat), inv.reshape(-1)).reshape(dy.shape)
    dh = dy * g
    m1 = dh.mean(axis=-1, keepdims=True)
    m2 = (dh * xhat).mean(axis=-1, keepdims=True)
    return inv[..., None] * (dh - m1 - xhat * m2)


def softmax_rows(z):
    if HAVE_NUMBA:
        return _softmax_rows_nb(_as2d(z)).reshape(z.shape)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_rows(p, dp):
    if HAVE_NUMBA:
        return _softmax_bwd_rows_nb(_as2d(p), _as2d(dp)).reshape(p.shape)
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))
