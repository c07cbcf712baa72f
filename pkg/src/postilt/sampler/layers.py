"""Layer kit with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the output gradient and the cache and returns input/parameter
gradients. Feature maps are (N, C, H, W).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAK = 0.2
ADAIN_EPS = 1e-5


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, w, b, stride=1, pad=1):
    """Cross-correlation with weights (O, C, k, k), zero padding ``pad``."""
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(xp, k, stride)
    y = cols @ w.reshape(w.shape[0], -1).T + b
    y = y.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x, w, stride, pad)


def conv2d_backward(g, cache):
    x, w, stride, pad = cache
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, _, _ = _im2col(xp, k, stride)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def conv_transpose2d_forward(x, w, b, stride=2, pad=1):
    """Transposed convolution with weights (C_in, C_out, k, k).

    Output side is ``(H - 1) * stride - 2 * pad + k``.
    """
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full_h, full_w = (h - 1) * stride + k, (wd - 1) * stride + k
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, c)
    contrib = (x2 @ w.reshape(c, -1)).reshape(n, h, wd, o, k, k)
    yp = np.zeros((n, o, full_h, full_w), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            yp[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    y = yp[:, :, pad : full_h - pad, pad : full_w - pad] + b[None, :, None, None]
    return np.ascontiguousarray(y), (x, w, stride, pad)


def conv_transpose2d_backward(g, cache):
    x, w, stride, pad = cache
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, _, _ = _im2col(gp, k, stride)  # (n*h*wd, o*k*k)
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, c)
    dw = (x2.T @ cols).reshape(w.shape)
    dx = (cols @ w.reshape(c, -1).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    db = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def linear_forward(x, w, b):
    """x (N, D_in), w (D_out, D_in)."""
    return x @ w.T + b, (x, w)


def linear_backward(g, cache):
    x, w = cache
    return g @ w, g.T @ x, g.sum(axis=0)


def leaky_relu_forward(x, slope=LEAK):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(g, cache):
    x, slope = cache
    return np.where(x > 0, g, slope * g)


def adain_forward(x, gamma, beta, eps=ADAIN_EPS):
    """gamma * (x - mu) / (sigma + eps) + beta with per-(N, C) spatial statistics.

    ``gamma`` and ``beta`` are (N, C). sigma is the population std.
    """
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc**2).mean(axis=(2, 3), keepdims=True))
    s = sigma + eps
    xhat = xc / s
    y = gamma[:, :, None, None] * xhat + beta[:, :, None, None]
    return y, (xhat, xc, sigma, s, gamma)


def adain_backward(g, cache):
    xhat, xc, sigma, s, gamma = cache
    m = xhat.shape[2] * xhat.shape[3]
    dgamma = (g * xhat).sum(axis=(2, 3))
    dbeta = g.sum(axis=(2, 3))
    dxhat = g * gamma[:, :, None, None]
    # xhat = xc / s, s = sigma + eps, sigma = sqrt(mean(xc^2))
    ds = -(dxhat * xc).sum(axis=(2, 3), keepdims=True) / s**2
    safe = np.where(sigma > 0, sigma, 1.0)
    dsigma_dx = np.where(sigma > 0, xc / (m * safe), 0.0)
    dx_direct = dxhat / s
    dx = dx_direct - dx_direct.mean(axis=(2, 3), keepdims=True) + ds * dsigma_dx
    return dx, dgamma, dbeta


def tanh_bound_forward(x, bound):
    t = np.tanh(x)
    return bound * t, (t, bound)


def tanh_bound_backward(g, cache):
    t, bound = cache
    return g * bound * (1 - t**2)
