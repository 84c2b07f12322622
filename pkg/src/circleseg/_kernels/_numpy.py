"""Numpy reference implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable; also the
ground truth the native backend is tested against.
"""

from __future__ import annotations

import numpy as np


def conv2d_forward(x, w, b, stride, pad):
    """2-D convolution, NHWC-single-image layout.

    x: (H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,).
    Returns (Ho, Wo, Cout) with Ho = (H + 2*pad - kh)//stride + 1.
    """
    h, wi, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wi + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    y = np.broadcast_to(b, (ho, wo, cout)).copy()
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[ky : ky + ho * stride : stride, kx : kx + wo * stride : stride, :]
            y += patch @ w[ky, kx]
    return y


def conv2d_backward(x, w, gy, stride, pad, need_gx=True):
    """Gradients of :func:`conv2d_forward` w.r.t. x, w, and b."""
    h, wi, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo, _ = gy.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    gb = gy.sum(axis=(0, 1))
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp) if need_gx else None
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[ky : ky + ho * stride : stride, kx : kx + wo * stride : stride, :]
            gw[ky, kx] = np.einsum("hwi,hwo->io", patch, gy)
            if need_gx:
                gxp[ky : ky + ho * stride : stride, kx : kx + wo * stride : stride, :] += (
                    gy @ w[ky, kx].T
                )
    if not need_gx:
        return None, gw, gb
    gx = gxp[pad : pad + h, pad : pad + wi, :] if pad else gxp
    return np.ascontiguousarray(gx), gw, gb


def circular_conv_forward(f, k):
    """Convolution over a closed vertex ring.

    f: (N, Din), k: (2r+1, Din, Dout); row i of the output is
    sum_j f[(i + j - r) mod N] @ k[j].
    """
    n = f.shape[0]
    taps, _, dout = k.shape
    r = (taps - 1) // 2
    out = np.zeros((n, dout))
    idx = np.arange(n)
    for j in range(taps):
        out += f[(idx + j - r) % n] @ k[j]
    return out


def circular_conv_backward(f, k, gy):
    """Gradients of :func:`circular_conv_forward` w.r.t. f and k."""
    n = f.shape[0]
    taps = k.shape[0]
    r = (taps - 1) // 2
    gf = np.zeros_like(f)
    gk = np.zeros_like(k)
    idx = np.arange(n)
    for j in range(taps):
        src = (idx + j - r) % n
        gk[j] = f[src].T @ gy
        np.add.at(gf, src, gy @ k[j].T)
    return gf, gk
