"""Numpy kernels for every layer kind: forward plus exact reverse-mode backward.

Conventions: batch axis first, channels last. Conv features are (N, H, W, C),
dense features (N, D); conv weights are (k, k, C_in, C_out) so the patch
matrix multiplies them without any transpose. Each forward returns
(output, aux) where ``aux`` holds whatever the matching backward needs.
"""

from __future__ import annotations

import numpy as np


# -- convolution ------------------------------------------------------------


def _gather_patches(x, kernel, stride, pad, ho, wo):
    """(N,H,W,C) -> (N,Ho,Wo,k*k*C) patch tensor, contiguous by construction."""
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kernel * kernel * c), dtype=x.dtype)
    i = 0
    for di in range(kernel):
        for dj in range(kernel):
            cols[..., i : i + c] = x[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :]
            i += c
    return cols


def conv_forward(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    k, _, _, c_out = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = _gather_patches(x, k, stride, pad, ho, wo)
    out = cols.reshape(-1, k * k * c) @ w.reshape(-1, c_out)
    return out.reshape(n, ho, wo, c_out) + b, (cols, x.shape, (ho, wo))


def conv_backward(dout, w, aux, stride, pad):
    cols, x_shape, (ho, wo) = aux
    n, h, wd, c = x_shape
    k, _, _, c_out = w.shape
    dmat = np.ascontiguousarray(dout).reshape(-1, c_out)
    dw = (cols.reshape(-1, k * k * c).T @ dmat).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.reshape(-1, c_out).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += dcols[:, :, :, di, dj, :]
    return (dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp), dw, db


# -- dense ------------------------------------------------------------------


def linear_forward(x, w, b):
    return x @ w.T + b, x


def linear_backward(dout, w, x):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


# -- normalization ----------------------------------------------------------
# Batch norm is per-channel: statistics over every axis except the last.


def _bn_axes(x):
    return tuple(range(x.ndim - 1))


def _bn_bcast(v, x):
    return v.reshape((1,) * (x.ndim - 1) + (-1,))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps, momentum, train):
    axes = _bn_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_rm = (1 - momentum) * running_mean + momentum * mean
        new_rv = (1 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_rm = new_rv = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_bcast(mean, x)) * _bn_bcast(inv, x)
    out = _bn_bcast(gamma, x) * xhat + _bn_bcast(beta, x)
    return out, (xhat, inv, train), (new_rm, new_rv)


def batchnorm_backward(dout, gamma, aux):
    xhat, inv, train = aux
    axes = _bn_axes(dout)
    m = dout.size // dout.shape[-1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_bcast(gamma, dout)
    if not train:
        return dxhat * _bn_bcast(inv, dout), dgamma, dbeta
    dx = (
        dxhat
        - _bn_bcast(dxhat.sum(axis=axes) / m, dout)
        - xhat * _bn_bcast((dxhat * xhat).sum(axis=axes) / m, dout)
    ) * _bn_bcast(inv, dout)
    return dx, dgamma, dbeta


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv)


def layernorm_backward(dout, gamma, aux):
    xhat, inv = aux
    d = dout.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
    return dx, dgamma, dbeta


# -- pooling ----------------------------------------------------------------


def avgpool_forward(x, k):
    n, h, w, c = x.shape
    out = x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))
    return out, (x.shape, k)


def avgpool_backward(dout, aux):
    (n, h, w, c), k = aux
    scale = 1.0 / (k * k)
    return np.broadcast_to(
        dout[:, :, None, :, None, :] * scale, (n, h // k, k, w // k, k, c)
    ).reshape(n, h, w, c)


def globalpool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def globalpool_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


# -- softmax / power normalization ------------------------------------------


def softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dout, p):
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def power_normalize_forward(x):
    """Scale each sample so its mean square is 1. Rows of zeros are rejected upstream."""
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    y = x / rms
    return y, (y, rms)


def power_normalize_backward(dout, aux):
    y, rms = aux
    # y = x / rms(x); dy/dx = (I - y y^T / D) / rms
    return (dout - y * np.mean(dout * y, axis=-1, keepdims=True)) / rms
