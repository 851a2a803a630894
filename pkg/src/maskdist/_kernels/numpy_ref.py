"""Numpy fallback for the row-wise hot kernels.

Same signatures and semantics as the compiled extension in ``_core.pyx``;
used when the extension is not built (or when forced via MASKDIST_KERNELS).
All inputs are float64 / int64, rows are the last axis of a 2-D view.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_rows(y, gy):
    inner = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def log_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def log_softmax_backward_rows(out, gy):
    # out is the forward result, softmax = exp(out)
    return gy - np.exp(out) * gy.sum(axis=1, keepdims=True)


def layernorm_rows(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, mean[:, 0], rstd[:, 0]


def layernorm_backward_rows(x, gain, mean, rstd, gy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def gather_rows(table, idx):
    return table[idx]


def scatter_add_rows(gtable, idx, gy):
    np.add.at(gtable, idx, gy)


def categorical_rows(probs, u):
    """Inverse-CDF draw per row: index k with cdf[k-1] <= u < cdf[k]."""
    cdf = np.cumsum(probs, axis=1)
    # guard against rounding: force the last cdf entry to cover u
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)
    return np.int64((cdf > u[:, None]).argmax(axis=1))
