"""Hot numeric kernels with optional numba acceleration.

Every kernel has a pure-numpy implementation and, when numba is importable
and not disabled, an @njit twin compiled from the same scalar recurrences.
Set DBSWIN_NUMBA=0 to force the numpy path. All kernels operate on
contiguous float64 arrays; 2-D inputs are (rows, dim) with the reduction
running over the last axis.
"""

import math
import os

import numpy as np

_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


# ---------------------------------------------------------------- numpy path

def _np_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_grad(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def _np_layernorm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_rows_grad(gy, xhat, rstd, gamma):
    d = xhat.shape[1]
    dxhat = gy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    return dx, dgamma, dbeta


def _np_gelu(x):
    u = _GELU_A * (x + _GELU_B * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _np_gelu_grad(x, gy):
    u = _GELU_A * (x + _GELU_B * x ** 3)
    t = np.tanh(u)
    du = _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_NUMPY_TABLE = {
    "softmax_rows": _np_softmax_rows,
    "softmax_rows_grad": _np_softmax_rows_grad,
    "layernorm_rows": _np_layernorm_rows,
    "layernorm_rows_grad": _np_layernorm_rows_grad,
    "gelu": _np_gelu,
    "gelu_grad": _np_gelu_grad,
    "sigmoid": _np_sigmoid,
}


# ---------------------------------------------------------------- numba path

def _build_numba_table():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_grad(y, gy):
        n, d = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += y[i, j] * gy[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (gy[i, j] - dot)
        return dx

    @njit(cache=True)
    def layernorm_rows(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_rows_grad(gy, xhat, rstd, gamma):
        n, d = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = gy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                g = gy[i, j] * gamma[j]
                dx[i, j] = rstd[i] * (g - m1 - xhat[i, j] * m2)
                dgamma[j] += gy[i, j] * xhat[i, j]
                dbeta[j] += gy[i, j]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def gelu(x):
        out = np.empty_like(x)
        flat = x.ravel()
        of = out.ravel()
        for i in range(flat.size):
            v = flat[i]
            u = _GELU_A * (v + _GELU_B * v ** 3)
            of[i] = 0.5 * v * (1.0 + math.tanh(u))
        return out

    @njit(cache=True)
    def gelu_grad(x, gy):
        out = np.empty_like(x)
        xf = x.ravel()
        gf = gy.ravel()
        of = out.ravel()
        for i in range(xf.size):
            v = xf[i]
            u = _GELU_A * (v + _GELU_B * v ** 3)
            t = math.tanh(u)
            du = _GELU_A * (1.0 + 3.0 * _GELU_B * v * v)
            of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    @njit(cache=True)
    def sigmoid(x):
        out = np.empty_like(x)
        xf = x.ravel()
        of = out.ravel()
        for i in range(xf.size):
            v = xf[i]
            if v >= 0.0:
                of[i] = 1.0 / (1.0 + math.exp(-v))
            else:
                e = math.exp(v)
                of[i] = e / (1.0 + e)
        return out

    return {
        "softmax_rows": softmax_rows,
        "softmax_rows_grad": softmax_rows_grad,
        "layernorm_rows": layernorm_rows,
        "layernorm_rows_grad": layernorm_rows_grad,
        "gelu": gelu,
        "gelu_grad": gelu_grad,
        "sigmoid": sigmoid,
    }


def numba_available():
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


USING_NUMBA = False
_numba_table = None


def select_backend(use_numba):
    """Bind the module-level kernel names to one backend. Returns the
    backend actually selected ('numba' or 'numpy')."""
    global USING_NUMBA, _numba_table
    table = _NUMPY_TABLE
    USING_NUMBA = False
    if use_numba and numba_available():
        if _numba_table is None:
            _numba_table = _build_numba_table()
        table = _numba_table
        USING_NUMBA = True
    for name, fn in table.items():
        globals()[name] = fn
    return "numba" if USING_NUMBA else "numpy"


select_backend(os.environ.get("DBSWIN_NUMBA", "1") != "0")
