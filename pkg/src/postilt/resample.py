"""Grid resampling shared by the pyramid, the low-resolution solver and the generator.

All functions act on the last two axes so stacks of fields (K, H, W) pass through.
"""

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ConfigError

BICUBIC_A = -0.75


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling."""
    if factor == 1:
        return np.asarray(x, dtype=float)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ConfigError(f"grid {h}x{w} is not divisible by pooling factor {factor}")
    lead = x.shape[:-2]
    blocks = np.asarray(x, dtype=float).reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def box_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Stride-1 ``window x window`` mean filter, zero padded, output same size.

    The divisor is always ``window**2`` so values near the border are pulled
    toward zero.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"box window must be odd and positive, got {window}")
    x = np.asarray(x, dtype=float)
    size = (1,) * (x.ndim - 2) + (window, window)
    return ndimage.uniform_filter(x, size=size, mode="constant", cval=0.0)


def _keys_weight(t: np.ndarray) -> np.ndarray:
    a = BICUBIC_A
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = ((a + 2) * t[near] - (a + 3)) * t[near] ** 2 + 1
    w[far] = ((t[far] - 5) * t[far] + 8) * t[far] * a - 4 * a
    return w


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bicubic interpolation operator of shape (n_out, n_in).

    Half-pixel aligned sampling (pixel centers map onto pixel centers) with
    clamped borders; rows sum to one.
    """
    out = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        taps = np.arange(base - 1, base + 3)
        weights = _keys_weight(src - taps)
        for tap, wgt in zip(np.clip(taps, 0, n_in - 1), weights):
            out[i, tap] += wgt
    out.setflags(write=False)
    return out


def bicubic_resize(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Separable bicubic resize of the last two axes to ``shape``."""
    h, w = x.shape[-2:]
    rows = bicubic_matrix(h, shape[0]).astype(x.dtype, copy=False)
    cols = bicubic_matrix(w, shape[1]).astype(x.dtype, copy=False)
    return rows @ x @ cols.T


def bicubic_resize_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Transpose of :func:`bicubic_resize`; maps an output-grid gradient back to ``shape``."""
    h, w = g.shape[-2:]
    rows = bicubic_matrix(shape[0], h).astype(g.dtype, copy=False)
    cols = bicubic_matrix(shape[1], w).astype(g.dtype, copy=False)
    return rows.T @ g @ cols
