"""Hot row-wise kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``VIOLET_DISABLE_NUMBA`` is unset or ``"0"``.  Both paths compute
the same quantities; results agree to rounding, not bit-for-bit.
"""

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


def _want_numba():
    flag = os.environ.get("VIOLET_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _want_numba():
        raise ImportError("numba disabled by VIOLET_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# pure numpy


def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_np(dy, xhat, rstd, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    ) * rstd[:, None]
    return dx, dgain, dbias


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def gelu_bwd_np(x, dy):
    u = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def lcs_length_np(a, b):
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return 0
    prev = [0] * (n + 1)
    for i in range(m):
        cur = [0] * (n + 1)
        ai = a[i]
        for j in range(n):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[n]


# --------------------------------------------------------------------------
# numba

if HAVE_NUMBA:

    @njit(cache=True)
    def softmax_rows_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            # exp pass kept free of the reduction so it vectorises
            for j in range(n):
                out[i, j] = math.exp(x[i, j] - mx)
            s = 0.0
            for j in range(n):
                s += out[i, j]
            for j in range(n):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def layer_norm_fwd_nb(x, gain, bias, eps):
        m, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m)
        for i in range(m):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            var /= n
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layer_norm_bwd_nb(dy, xhat, rstd, gain):
        m, n = xhat.shape
        dx = np.empty_like(dy)
        dgain = np.zeros(n)
        dbias = np.zeros(n)
        for i in range(m):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                g = dy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                dx[i, j] = (dy[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i]
        return dx, dgain, dbias

    @njit(cache=True)
    def _gelu_fwd_flat(x):
        out = np.empty_like(x)
        for k in range(x.size):
            v = x[k]
            out[k] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @njit(cache=True)
    def _gelu_bwd_flat(x, dy):
        out = np.empty_like(x)
        for k in range(x.size):
            v = x[k]
            t = math.tanh(GELU_C * (v + 0.044715 * v * v * v))
            du = GELU_C * (1.0 + 3 * 0.044715 * v * v)
            out[k] = dy[k] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    def gelu_fwd_nb(x):
        return _gelu_fwd_flat(np.ascontiguousarray(x).ravel()).reshape(x.shape)

    def gelu_bwd_nb(x, dy):
        return _gelu_bwd_flat(
            np.ascontiguousarray(x).ravel(), np.ascontiguousarray(dy).ravel()
        ).reshape(x.shape)

    @njit(cache=True)
    def _lcs_nb(a, b):
        m = a.shape[0]
        n = b.shape[0]
        if m == 0 or n == 0:
            return 0
        prev = np.zeros(n + 1, dtype=np.int64)
        cur = np.zeros(n + 1, dtype=np.int64)
        for i in range(m):
            cur[0] = 0
            for j in range(n):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif cur[j] > prev[j + 1]:
                    cur[j + 1] = cur[j]
                else:
                    cur[j + 1] = prev[j + 1]
            prev, cur = cur, prev
        return prev[n]

    def lcs_length_nb(a, b):
        return int(_lcs_nb(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))

    # numpy's vectorised exp beats the compiled loop; see benchmarks/
    softmax_rows = softmax_rows_np
    layer_norm_fwd = layer_norm_fwd_nb
    layer_norm_bwd = layer_norm_bwd_nb
    gelu_fwd = gelu_fwd_nb
    gelu_bwd = gelu_bwd_nb
    lcs_length = lcs_length_nb
else:
    softmax_rows = softmax_rows_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np
    lcs_length = lcs_length_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"
