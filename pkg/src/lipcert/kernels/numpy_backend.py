"""Pure-numpy kernel implementations (stride tricks + slice accumulation)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _out_size(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Extract conv patches from a padded batch.

    xp: (N, C, Hp, Wp) -> (N, Ho, Wo, C*kh*kw), patch layout matching
    a row-major reshape of a (C, kh, kw) window.
    """
    n, c, hp, wp = xp.shape
    ho, wo = _out_size(hp, kh, sh), _out_size(wp, kw, sw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(cols).reshape(n, ho, wo, c * kh * kw)


def col2im(
    cols: np.ndarray,
    c: int,
    hp: int,
    wp: int,
    kh: int,
    kw: int,
    sh: int,
    sw: int,
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back onto the padded canvas."""
    n, ho, wo, _ = cols.shape
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += patches[
                :, :, :, :, i, j
            ]
    return xp


def maxpool_forward(
    x: np.ndarray, kh: int, kw: int, sh: int, sw: int
) -> tuple[np.ndarray, np.ndarray]:
    """Max over windows; ties go to the lowest flat window index.

    Returns (out (N,C,Ho,Wo), idx (N,C,Ho,Wo) int64 flat index into kh*kw).
    """
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(*win.shape[:4], kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(
    g: np.ndarray, idx: np.ndarray, h: int, w: int, kh: int, kw: int, sh: int, sw: int
) -> np.ndarray:
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    iy = oy[None, None] * sh + idx // kw
    ix = ox[None, None] * sw + idx % kw
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn[..., None, None], cc[..., None, None], iy, ix), g)
    return dx


def avgpool_forward(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return win.mean(axis=(-2, -1))


def avgpool_backward(
    g: np.ndarray, h: int, w: int, kh: int, kw: int, sh: int, sw: int
) -> np.ndarray:
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    gk = g / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gk
    return dx
