"""Fused scatter kernels for the backward passes numpy handles poorly.

Strided read-modify-write loops (routing window gradients back onto the
input plane) dominate backward time when done as nine separate numpy
slice-adds; these compiled loops do each in one pass.  All kernels are
sequential and IEEE-strict, so results stay bit-deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def scatter_windows(dcols, H, W, kh, kw, sh, sw, ph, pw, dh, dw):
    """Accumulate per-window gradients (B, C, kh*kw, Ho, Wo) onto (B, C, H, W)."""
    B, C, KK, Ho, Wo = dcols.shape
    dx = np.zeros((B, C, H, W), dtype=dcols.dtype)
    for b in range(B):
        for c in range(C):
            for t in range(KK):
                k = t // kw
                l = t % kw
                for oh in range(Ho):
                    ih = oh * sh + k * dh - ph
                    if ih < 0 or ih >= H:
                        continue
                    for ow in range(Wo):
                        iw = ow * sw + l * dw - pw
                        if 0 <= iw < W:
                            dx[b, c, ih, iw] += dcols[b, c, t, oh, ow]
    return dx


@njit(cache=True, fastmath=False)
def depthwise_input_grad(g, w9, H, W, kh, kw, sh, sw, ph, pw, dh, dw):
    """Input gradient of a depthwise convolution, fused over taps.

    ``g`` is (B, C, Ho, Wo), ``w9`` is (C, kh*kw); returns (B, C, H, W).
    """
    B, C, Ho, Wo = g.shape
    dx = np.zeros((B, C, H, W), dtype=g.dtype)
    for b in range(B):
        for c in range(C):
            for k in range(kh):
                for l in range(kw):
                    coef = w9[c, k * kw + l]
                    for oh in range(Ho):
                        ih = oh * sh + k * dh - ph
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(Wo):
                            iw = ow * sw + l * dw - pw
                            if 0 <= iw < W:
                                dx[b, c, ih, iw] += coef * g[b, c, oh, ow]
    return dx


@njit(cache=True, fastmath=False)
def uniform_window_grad(gc, H, W, kh, kw, sh, sw, ph, pw):
    """Average-pool input gradient: add gc to every in-bounds window cell."""
    B, C, Ho, Wo = gc.shape
    dx = np.zeros((B, C, H, W), dtype=gc.dtype)
    for b in range(B):
        for c in range(C):
            for k in range(kh):
                for l in range(kw):
                    for oh in range(Ho):
                        ih = oh * sh + k - ph
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(Wo):
                            iw = ow * sw + l - pw
                            if 0 <= iw < W:
                                dx[b, c, ih, iw] += gc[b, c, oh, ow]
    return dx
