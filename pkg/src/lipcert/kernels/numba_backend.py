"""Numba-JIT kernel implementations.

Same contracts as ``numpy_backend``; explicit loops compiled with ``@njit``.
First use per process pays compilation cost, cached on disk afterwards.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def im2col(xp, kh, kw, sh, sw):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.empty((n, ho, wo, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                p = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[b, oy, ox, p] = xp[b, ch, oy * sh + i, ox * sw + j]
                            p += 1
    return cols


@njit(cache=True)
def col2im(cols, c, hp, wp, kh, kw, sh, sw):
    n, ho, wo, _ = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                p = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            xp[b, ch, oy * sh + i, ox * sw + j] += cols[b, oy, ox, p]
                            p += 1
    return xp


@njit(cache=True)
def maxpool_forward(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ch, oy * sh, ox * sw]
                    besti = 0
                    for i in range(kh):
                        for j in range(kw):
                            v = x[b, ch, oy * sh + i, ox * sw + j]
                            if v > best:  # strict: ties keep lowest index
                                best = v
                                besti = i * kw + j
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = besti
    return out, idx


@njit(cache=True)
def maxpool_backward(g, idx, h, w, kh, kw, sh, sw):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    k = idx[b, ch, oy, ox]
                    dx[b, ch, oy * sh + k // kw, ox * sw + k % kw] += g[b, ch, oy, ox]
    return dx


@njit(cache=True)
def avgpool_forward(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    inv = 1.0 / (kh * kw)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    s = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            s += x[b, ch, oy * sh + i, ox * sw + j]
                    out[b, ch, oy, ox] = s * inv
    return out


@njit(cache=True)
def avgpool_backward(g, h, w, kh, kw, sh, sw):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    inv = 1.0 / (kh * kw)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    gv = g[b, ch, oy, ox] * inv
                    for i in range(kh):
                        for j in range(kw):
                            dx[b, ch, oy * sh + i, ox * sw + j] += gv
    return dx
