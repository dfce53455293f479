"""Pure-numpy implementations of the spatial hot kernels.

These are the reference semantics.  The compiled backend in ``_core.pyx``
mirrors not just the results but the floating-point accumulation order of
every kernel here, so the two backends produce bit-identical arrays and the
engine's determinism guarantee does not depend on which one is loaded.

Array layout conventions:

* activations are ``(N, C, H, W)``, C-contiguous
* ``im2col`` output is ``(C*k*k, N*L)`` with rows ordered ``(c, ki, kj)``
  and columns ordered ``(n, ho, wo)``; ``L = Ho*Wo``
"""

import numpy as np


def im2col(x, k, stride, pad):
    """Unfold k x k patches of x into a (C*k*k, N*L) matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    v = np.lib.stride_tricks.as_strided(
        x, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return v.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, n * ho * wo)


def col2im(col, x_shape, k, stride, pad):
    """Adjoint of im2col: scatter-add columns back onto the input grid.

    Accumulation is tap-major: all (ki, kj) = (0, 0) contributions land
    first, then (0, 1), and so on.  Within one tap the targets are disjoint,
    so only the tap order affects rounding; the compiled backend uses the
    same order.
    """
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    gx = np.zeros((n, c, hp, wp), dtype=col.dtype)
    cols = col.reshape(c, k, k, n, ho, wo)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                cols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad:
        gx = np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + w])
    return gx


def maxpool2x2_forward(x):
    """2x2/2 max pool. Returns (pooled, idx) with idx in 0..3.

    idx encodes the argmax position inside each window in row-major window
    order (0,0), (0,1), (1,0), (1,1); ties keep the first occurrence.
    """
    n, c, h, w = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(gy, idx):
    """Route each output gradient to its window's argmax position."""
    n, c, h2, w2 = gy.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    return (
        g.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * h2, 2 * w2)
    )


def lerp_tables(n_in, dtype):
    """Source indices and weights for 2x bilinear upsampling of an axis.

    Half-pixel convention: src = (dst + 0.5) / 2 - 0.5, edge-clamped.  The
    fractional weights are computed in float64 and cast (they are exactly
    0.25 / 0.75 except at the clamped edges, where clamping folds both taps
    onto the border sample).
    """
    d = np.arange(2 * n_in, dtype=np.float64)
    src = (d + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    w1 = (src - i0f).astype(dtype)
    w0 = (np.float64(1.0) - (src - i0f)).astype(dtype)
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, w0, w1


def upsample2x_forward(x):
    """Bilinear 2x upsample, separable: rows pass then columns pass."""
    n, c, h, w = x.shape
    i0, i1, w0h, w1h = lerp_tables(h, x.dtype)
    j0, j1, w0w, w1w = lerp_tables(w, x.dtype)
    t = w0h[:, None] * x[:, :, i0, :] + w1h[:, None] * x[:, :, i1, :]
    y = w0w * t[:, :, :, j0] + w1w * t[:, :, :, j1]
    return np.ascontiguousarray(y)


def upsample2x_backward(gy):
    """Adjoint of upsample2x_forward.

    Scatter order is fixed: for each axis, all w0 contributions in ascending
    destination order, then all w1 contributions.  np.add.at applies
    duplicate indices in element order, which pins the per-cell rounding;
    the compiled backend replays the same order.
    """
    n, c, h2, w2 = gy.shape
    h, w = h2 // 2, w2 // 2
    i0, i1, w0h, w1h = lerp_tables(h, gy.dtype)
    j0, j1, w0w, w1w = lerp_tables(w, gy.dtype)

    gt = np.zeros((n, c, h2, w), dtype=gy.dtype)
    gtw = gt.transpose(3, 0, 1, 2)
    gyw = gy.transpose(3, 0, 1, 2)
    np.add.at(gtw, j0, w0w[:, None, None, None] * gyw)
    np.add.at(gtw, j1, w1w[:, None, None, None] * gyw)

    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    gxh = gx.transpose(2, 0, 1, 3)
    gth = gt.transpose(2, 0, 1, 3)
    np.add.at(gxh, i0, w0h[:, None, None, None] * gth)
    np.add.at(gxh, i1, w1h[:, None, None, None] * gth)
    return gx
