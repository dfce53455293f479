"""Dense feature correspondence and probabilistic warping.

Features are compared on a flattened grid: a 1xCxHxW map becomes an HWxC
row matrix with position index u = h*W + w.  Cosine similarities between
channel-centralized rows form the correlation matrix; soft warps are
temperature-scaled softmax mixtures over its rows or columns.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .tensor import Tensor


@dataclass
class FlatFeature:
    """HWxC row-matrix view of a spatial feature map."""

    rows: Tensor
    h: int
    w: int

    @property
    def positions(self):
        return self.rows.shape[0]

    @property
    def channels(self):
        return self.rows.shape[1]


@dataclass
class CorrelationMatrix:
    """Pairwise cosine matrix (content rows x style columns) plus its warp
    temperature and the two grid geometries."""

    m: Tensor
    tau: float
    content_hw: tuple
    style_hw: tuple


def flatten_feature(t):
    """1xCxHxW -> FlatFeature with rows indexed by u = h*W + w."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ShapeMismatch(f"flatten_feature: need 1×C×H×W, got {tuple(t.shape)}")
    _, c, h, w = t.shape
    return FlatFeature(T.transpose2d(T.reshape(t, (c, h * w))), h, w)


def unflatten_feature(f):
    """Inverse of flatten_feature; pure reshaping, bit-preserving."""
    c = f.channels
    return T.reshape(T.transpose2d(f.rows), (1, c, f.h, f.w))


def centralize(f):
    """Subtract each channel's spatial mean."""
    mean = T.reduce(f.rows, "mean", axes=0)
    return FlatFeature(T.add_rowvec(f.rows, T.scale(mean, -1.0)), f.h, f.w)


def correlation(fc, fs, tau):
    """Cosine similarities between centralized content and style rows.

    Norms are floored at 1e-8, so constant (zero after centralization)
    rows yield zero similarity rather than NaN.
    """
    if fc.channels != fs.channels:
        raise ShapeMismatch(
            f"correlation: channel counts differ ({fc.channels} vs {fs.channels})"
        )
    if not tau > 0:
        raise ConfigError(f"correlation: tau must be positive, got {tau}")
    nc = T.row_normalize(centralize(fc).rows)
    ns = T.row_normalize(centralize(fs).rows)
    m = T.matmul(nc, T.transpose2d(ns))
    return CorrelationMatrix(m, float(tau), (fc.h, fc.w), (fs.h, fs.w))


def warp_feature(corr, fs):
    """Soft gather of style rows onto the content grid.

    Each output row is the softmax(row of M / tau) mixture of style rows:
    a convex combination, differentiable through both M and the feature.
    """
    if corr.m.shape[1] != fs.positions:
        raise ShapeMismatch(
            f"warp_feature: M has {corr.m.shape[1]} columns, feature has "
            f"{fs.positions} positions"
        )
    weights = T.softmax_rows(corr.m, corr.tau)
    h, w = corr.content_hw
    return FlatFeature(T.matmul(weights, fs.rows), h, w)


def warp_image(corr, style_lowres):
    """Soft gather of style pixels onto the content grid.

    Takes and returns 3xhxw at the correlation grid's resolution; the
    caller up/downsamples to move between this and full resolution.
    """
    if style_lowres.ndim != 3 or style_lowres.shape[0] != 3:
        raise ShapeMismatch(
            f"warp_image: need 3×h×w, got {tuple(style_lowres.shape)}"
        )
    _, h, w = style_lowres.shape
    if h * w != corr.m.shape[1]:
        raise ShapeMismatch(
            f"warp_image: M has {corr.m.shape[1]} columns, image has {h * w} pixels"
        )
    pixels = T.transpose2d(T.reshape(style_lowres, (3, h * w)))
    warped = T.matmul(T.softmax_rows(corr.m, corr.tau), pixels)
    hc, wc = corr.content_hw
    return T.reshape(T.transpose2d(warped), (3, hc, wc))


def cycle_reconstruct(corr, fs, fc):
    """Round-trip both features through the soft correspondence.

    The style reconstruction back-warps the forward-warped style rows:
    r_S(v) = sum_u colsoftmax_u(M(:,v)/tau) * [sum_v' rowsoftmax(M(u,:)/tau) f_S(v')].
    The content reconstruction swaps the two roles.  Returns (r_C, r_S).
    """
    if corr.m.shape[1] != fs.positions or corr.m.shape[0] != fc.positions:
        raise ShapeMismatch(
            f"cycle_reconstruct: M is {tuple(corr.m.shape)} but features have "
            f"{fc.positions} content / {fs.positions} style positions"
        )
    rows = T.softmax_rows(corr.m, corr.tau)
    cols_t = T.softmax_rows(T.transpose2d(corr.m), corr.tau)
    r_s = T.matmul(cols_t, T.matmul(rows, fs.rows))
    r_c = T.matmul(rows, T.matmul(cols_t, fc.rows))
    hc, wc = corr.content_hw
    hs, ws = corr.style_hw
    return FlatFeature(r_c, hc, wc), FlatFeature(r_s, hs, ws)


def matched_points(corr):
    """(u, best v, similarity) for every content position, by raw cosine."""
    m = corr.m.data
    best = m.argmax(axis=1)
    return [(u, int(v), float(m[u, v])) for u, v in enumerate(best)]


def write_matched_points(corr, path):
    """Dump matched_points as CSV with columns u,v,similarity."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["u", "v", "similarity"])
        for u, v, s in matched_points(corr):
            out.writerow([u, v, f"{s:.6f}"])
