"""Content, style, and cycle losses plus their weighted total.

Content is a contrastive term: each content position must be most similar
to the co-located output position among all spatial candidates at that
layer.  Style is a patch-matching term against detached nearest-neighbor
style patches.  Cycle penalizes round-trip reconstruction error through
the soft correspondence.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._kernels import im2col
from .correspondence import flatten_feature
from .errors import ConfigError, ShapeMismatch
from .layers import ENCODER_TAPS
from .tensor import Tensor, custom_op

# similarity blocks are computed this many rows at a time so the full
# position-by-position matrix never materializes at large sizes
CHUNK = 1024

_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.2
    lambda_cyc: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ConfigError(f"lambda_c must be in [0, 1], got {self.lambda_c}")
        if self.lambda_cyc < 0.0:
            raise ConfigError(f"lambda_cyc must be >= 0, got {self.lambda_cyc}")
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class LayerSet:
    content_layers: tuple = ("relu2_2", "relu3_4", "relu4_2")
    style_layers: tuple = ("relu2_2", "relu3_4", "relu4_2")
    patch_size: int = 3

    def __post_init__(self):
        for name in tuple(self.content_layers) + tuple(self.style_layers):
            if name not in ENCODER_TAPS:
                raise ConfigError(f"unknown encoder tap {name!r} in layer set")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(
                f"patch_size must be odd and >= 1, got {self.patch_size}"
            )


def similarity_s(f, g, tau):
    """exp(cos(f, g) / tau) on plain vectors; norms floored at 1e-8."""
    f = np.asarray(f, np.float64).ravel()
    g = np.asarray(g, np.float64).ravel()
    na = max(float(np.linalg.norm(f)), _EPS)
    nb = max(float(np.linalg.norm(g)), _EPS)
    return math.exp(float(f @ g) / (na * nb) / tau)


def _nce_term(anchor, candidate, tau):
    """Sum over rows u of  logsumexp_v(cos(a_u, c_v)/tau) - cos(a_u, c_u)/tau.

    anchor and candidate are unit-row matrices of equal shape.  Fused op:
    the P x P cosine matrix is built chunk by chunk in both passes, so
    peak memory stays at CHUNK x P.
    """
    if anchor.shape != candidate.shape:
        raise ShapeMismatch(
            f"content term: {tuple(anchor.shape)} vs {tuple(candidate.shape)}"
        )
    a, c = anchor.data, candidate.data
    p = a.shape[0]
    inv = a.dtype.type(1.0 / tau)
    total = 0.0
    for s in range(0, p, CHUNK):
        blk = (a[s:s + CHUNK] @ c.T) * inv
        m = blk.max(axis=1)
        lse = np.log(np.exp(blk - m[:, None]).sum(axis=1)) + m
        diag = blk[np.arange(blk.shape[0]), s + np.arange(blk.shape[0])]
        total += float((lse - diag).sum(dtype=np.float64))
    out = np.asarray(total, dtype=a.dtype)

    def vjp(g):
        gs = float(g)
        ga = np.empty_like(a)
        gc = np.zeros_like(c)
        for s in range(0, p, CHUNK):
            blk = (a[s:s + CHUNK] @ c.T) * inv
            blk -= blk.max(axis=1, keepdims=True)
            np.exp(blk, out=blk)
            blk /= blk.sum(axis=1, keepdims=True)
            rows = np.arange(blk.shape[0])
            blk[rows, s + rows] -= 1.0
            ga[s:s + CHUNK] = (blk @ c) * (inv * gs)
            gc += (blk.T @ a[s:s + CHUNK]) * (inv * gs)
        return ga, gc

    return custom_op("nce_term", (anchor, candidate), out, vjp)


def _require_tap(taps, name, who):
    if name not in taps:
        raise ConfigError(f"{who}: tap {name!r} missing from feature map")
    return taps[name]


def content_loss(fc_taps, fout_taps, layers, tau):
    """Contrastive colocation loss summed over the content layer set."""
    total = None
    for name in layers.content_layers:
        fc = flatten_feature(_require_tap(fc_taps, name, "content_loss"))
        fo = flatten_feature(_require_tap(fout_taps, name, "content_loss"))
        term = _nce_term(
            T.row_normalize(fc.rows, _EPS), T.row_normalize(fo.rows, _EPS), tau
        )
        total = term if total is None else T.add(total, term)
    return total


def _nn_style_targets(out_patches, style_patches):
    """Index of each output patch's best style patch by cosine; first index
    wins ties.  Pure numpy on detached data."""
    def unit(rows):
        n = np.sqrt((rows * rows).sum(axis=1))
        return rows / np.maximum(n, rows.dtype.type(_EPS))[:, None]

    no = unit(out_patches)
    ns = unit(style_patches)
    idx = np.empty(no.shape[0], dtype=np.int64)
    for s in range(0, no.shape[0], CHUNK):
        idx[s:s + CHUNK] = (no[s:s + CHUNK] @ ns.T).argmax(axis=1)
    return idx


def style_loss(fout_taps, fs_taps, layers):
    """Squared distance from each output patch to its nearest style patch.

    The assignment is recomputed from current values but treated as a
    constant: gradient reaches only the output patches.
    """
    k = layers.patch_size
    total = None
    for name in layers.style_layers:
        fo = _require_tap(fout_taps, name, "style_loss")
        fs = _require_tap(fs_taps, name, "style_loss")
        if fo.shape[1] != fs.shape[1]:
            raise ShapeMismatch(
                f"style_loss: channel mismatch at {name}: "
                f"{fo.shape[1]} vs {fs.shape[1]}"
            )
        for t in (fo, fs):
            if t.shape[2] < k or t.shape[3] < k:
                raise ShapeMismatch(
                    f"style_loss: {k}×{k} patch exceeds {name} map "
                    f"{t.shape[2]}×{t.shape[3]}"
                )
        out_patches = T.transpose2d(T.im2col_patches(fo, k))
        style_patches = im2col(fs.data, k, 1, 0).T
        idx = _nn_style_targets(out_patches.data, style_patches)
        target = Tensor(np.ascontiguousarray(style_patches[idx]))
        diff = T.sub(out_patches, target)
        term = T.reduce(T.mul(diff, diff), "sum")
        total = term if total is None else T.add(total, term)
    return total


def cycle_loss(fc, fs, r_c, r_s):
    """Squared reconstruction error of both round-trip warps."""
    for a, b, who in ((fc, r_c, "content"), (fs, r_s, "style")):
        if a.rows.shape != b.rows.shape:
            raise ShapeMismatch(
                f"cycle_loss: {who} shapes {tuple(a.rows.shape)} vs "
                f"{tuple(b.rows.shape)}"
            )
    dc = T.sub(fc.rows, r_c.rows)
    ds = T.sub(fs.rows, r_s.rows)
    return T.add(
        T.reduce(T.mul(dc, dc), "sum"), T.reduce(T.mul(ds, ds), "sum")
    )


def total_loss(l_cont, l_style, l_cyc, w):
    """(1 - lambda_c) * content + lambda_c * style + lambda_cyc * cycle."""
    out = T.add(
        T.scale(l_cont, 1.0 - w.lambda_c), T.scale(l_style, w.lambda_c)
    )
    return T.add(out, T.scale(l_cyc, w.lambda_cyc))
