"""The test-time training loop.

One session overfits a randomly initialized decoder and a fine-tunable
encoder to a single content/style pair.  Each iteration: encode the
content and style images (and, from iteration 2, the previous output, to
moving-average it into the content feature), build the correspondence,
warp style feature and style pixels onto the content grid, decode, blend,
clamp, re-encode the result, evaluate content/style/cycle losses,
backpropagate, and take one Adam step on all registered parameters.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correspondence import (
    FlatFeature,
    correlation,
    cycle_reconstruct,
    flatten_feature,
    unflatten_feature,
    warp_feature,
    warp_image,
)
from .dtpw import load_weights
from .errors import ConfigError, ImageError, MissingGradient, NanLoss, ShapeMismatch
from .image_io import from_nchw, resize_bilinear, to_nchw
from .layers import build_decoder, build_encoder
from .losses import LayerSet, LossWeights, content_loss, cycle_loss, style_loss, total_loss
from .tensor import Graph, Tensor

# the correspondence is built at this tap (256 channels, size/4 grid)
CORR_TAP = "relu3_4"

ENCODER_MEAN = (0.485, 0.456, 0.406)
ENCODER_STD = (0.229, 0.224, 0.225)

ABLATION_NAMES = (
    "no_warped_feature",
    "no_warped_image",
    "no_fma",
    "no_cycle",
    "no_generator",
)


@dataclass(frozen=True)
class Ablations:
    no_warped_feature: bool = False
    no_warped_image: bool = False
    no_fma: bool = False
    no_cycle: bool = False
    no_generator: bool = False

    def enabled(self):
        return tuple(n for n in ABLATION_NAMES if getattr(self, n))


@dataclass(frozen=True)
class DtpConfig:
    size: int = 256
    iters: int = 1000
    lr: float = 1e-4
    tau: float = 0.07
    lambda_w: float = 1.0 / 9.0
    momentum_m: float = 0.4
    lambda_c: float = 1.0 / 5.0
    lambda_cyc: float = 1.0
    seed: int = 1006
    snapshot_every: int = 0
    ablations: Ablations = field(default_factory=Ablations)
    weights_source: str = "random"

    def __post_init__(self):
        if self.size < 32 or self.size % 16:
            raise ConfigError(
                f"size must be a multiple of 16 and >= 32, got {self.size}"
            )
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("lambda_w", "momentum_m", "lambda_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.lambda_cyc < 0:
            raise ConfigError(f"lambda_cyc must be >= 0, got {self.lambda_cyc}")
        if self.snapshot_every < 0:
            raise ConfigError(
                f"snapshot_every must be >= 0, got {self.snapshot_every}"
            )
        if self.ablations.no_warped_image and self.ablations.no_generator:
            raise ConfigError(
                "no_warped_image and no_generator together leave no output path"
            )


@dataclass
class IterationReport:
    iteration: int
    l_cont: float
    l_style: float
    l_cyc: float
    l_total: float
    snapshot_path: str = ""


def normalize_for_encoder(img):
    """HxWx3 [0,1] image -> 1x3xHxW tensor standardized per channel."""
    a = np.asarray(img)
    if a.min() < -1e-6 or a.max() > 1 + 1e-6:
        raise ImageError(
            f"normalize_for_encoder: values outside [0,1] "
            f"(min {a.min():.4g}, max {a.max():.4g})"
        )
    return _normalize_tensor(to_nchw(a))


def _normalize_tensor(t):
    """In-graph per-channel standardization of a 1x3xHxW tensor."""
    scale = tuple(1.0 / s for s in ENCODER_STD)
    shift = tuple(-m / s for m, s in zip(ENCODER_MEAN, ENCODER_STD))
    return T.channel_affine(t, scale, shift)


def denormalize(t):
    """Inverse of normalize_for_encoder, back to an HxWx3 array."""
    undone = T.channel_affine(t.detach(), ENCODER_STD, ENCODER_MEAN)
    return from_nchw(undone)


def fma_update(fresh, prev_rows, momentum_m):
    """Moving-average blend of the content feature with the previous
    stylization's feature: m*fresh + (1-m)*prev, prev held constant.

    Before any stylization exists (prev_rows None) the fresh feature
    passes through unchanged.
    """
    if prev_rows is None:
        return fresh
    prev = np.asarray(prev_rows)
    if tuple(prev.shape) != tuple(fresh.rows.shape):
        raise ShapeMismatch(
            f"fma_update: prev {tuple(prev.shape)} vs fresh {tuple(fresh.rows.shape)}"
        )
    mixed = T.add(
        T.scale(fresh.rows, momentum_m),
        Tensor((1.0 - momentum_m) * prev.astype(fresh.rows.dtype)),
    )
    return FlatFeature(mixed, fresh.h, fresh.w)


def blend_output(decoded_residual, warped_image_fullres, lambda_w):
    """lambda_w * decoded + (1 - lambda_w) * warped."""
    if decoded_residual.shape != warped_image_fullres.shape:
        raise ShapeMismatch(
            f"blend_output: {tuple(decoded_residual.shape)} vs "
            f"{tuple(warped_image_fullres.shape)}"
        )
    return T.add(
        T.scale(decoded_residual, lambda_w),
        T.scale(warped_image_fullres, 1.0 - lambda_w),
    )


class Adam:
    """Bias-corrected Adam over an ordered (name, tensor) parameter list."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(t.data) for _, t in self.params]
        self._v = [np.zeros_like(t.data) for _, t in self.params]
        self._touched = [False] * len(self.params)

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradient(f"no gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if not self._touched[i]:
                if not g.any():
                    # zero gradient onto zero moments moves nothing;
                    # skipping the arithmetic is bit-identical
                    continue
                self._touched[i] = True
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self._m[i] / c1
            vhat = self._v[i] / c2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class DtpState:
    """Everything one session mutates across iterations."""

    def __init__(self, encoder, decoder, adam, noise_rng):
        self.encoder = encoder
        self.decoder = decoder
        self.adam = adam
        self.noise_rng = noise_rng
        self.prev_output = None
        self.fma_rows = None
        self.iteration = 0
        self._zeros = {}

    def zeros_for(self, shape, dtype):
        """Shared read-only zero buffers for never-reached gradients."""
        key = (tuple(shape), np.dtype(dtype))
        if key not in self._zeros:
            z = np.zeros(shape, dtype)
            z.setflags(write=False)
            self._zeros[key] = z
        return self._zeros[key]


def _build_state(cfg):
    root = np.random.SeedSequence(cfg.seed)
    enc_ss, dec_ss, noise_ss = root.spawn(3)
    if cfg.weights_source == "random":
        encoder = build_encoder(rng=np.random.default_rng(enc_ss))
    else:
        encoder = build_encoder(weights=load_weights(cfg.weights_source))
    decoder = build_decoder(np.random.default_rng(dec_ss))
    adam = Adam(encoder.parameters() + decoder.parameters(), cfg.lr)
    return DtpState(encoder, decoder, adam, np.random.default_rng(noise_ss))


def _refresh_fma_rows(state, cfg):
    """Encode the previous stylization with the current encoder weights.

    Runs outside any graph; the previous output is a constant for the
    coming iteration.  Before the first stylization exists this is a
    no-op and the fresh content feature passes through fma_update.
    """
    if cfg.ablations.no_fma or state.prev_output is None:
        state.fma_rows = None
        return
    taps = state.encoder.forward(
        _normalize_tensor(Tensor(state.prev_output)), (CORR_TAP,)
    )
    f = taps[CORR_TAP].data
    state.fma_rows = np.ascontiguousarray(f.reshape(f.shape[1], -1).T)


def _gaussian_stand_in(state, warped):
    """Seeded noise with the warped feature's per-channel spread."""
    rows = warped.rows.data
    std = rows.std(axis=0)
    noise = state.noise_rng.standard_normal(rows.shape).astype(rows.dtype) * std
    return FlatFeature(Tensor(noise), warped.h, warped.w)


def _forward(state, cfg, content_t, style_t, style_low_t, layers):
    """One full generation pass; returns the clamped output image tensor
    plus everything the losses need."""
    abl = cfg.ablations
    taps = sorted(set(layers.content_layers) | set(layers.style_layers) | {CORR_TAP})
    taps_c = state.encoder.forward(_normalize_tensor(content_t), taps)
    taps_s = state.encoder.forward(_normalize_tensor(style_t), taps)

    fresh = flatten_feature(taps_c[CORR_TAP])
    if abl.no_fma:
        fc = fresh
    else:
        fc = fma_update(fresh, state.fma_rows, cfg.momentum_m)
        taps_c = dict(taps_c)
        taps_c[CORR_TAP] = unflatten_feature(fc)

    fs = flatten_feature(taps_s[CORR_TAP])
    corr = correlation(fc, fs, cfg.tau)

    size = cfg.size
    warped_full = None
    if not abl.no_warped_image:
        low = warp_image(corr, style_low_t)
        x = T.reshape(low, (1, 3) + tuple(low.shape[1:]))
        x = T.upsample_bilinear_2x(T.upsample_bilinear_2x(x))
        warped_full = T.reshape(x, (3, size, size))

    decoded = None
    if not abl.no_generator:
        feat = warp_feature(corr, fs)
        if abl.no_warped_feature:
            feat = _gaussian_stand_in(state, feat)
        out4 = state.decoder.forward(unflatten_feature(feat))
        decoded = T.reshape(out4, (3, size, size))

    if abl.no_generator:
        mixed = warped_full
    elif abl.no_warped_image:
        mixed = decoded
    else:
        mixed = blend_output(decoded, warped_full, cfg.lambda_w)
    out = T.clamp01(T.reshape(mixed, (1, 3, size, size)))
    return out, taps_c, taps_s, fc, fs, corr


def _losses(state, cfg, out, taps_c, taps_s, fc, fs, corr, layers, weights):
    loss_taps = sorted(set(layers.content_layers) | set(layers.style_layers))
    taps_out = state.encoder.forward(_normalize_tensor(out), loss_taps)
    l_cont = content_loss(taps_c, taps_out, layers, cfg.tau)
    l_style = style_loss(taps_out, taps_s, layers)
    if cfg.ablations.no_cycle:
        l_cyc = Tensor(np.zeros((), np.float32))
    else:
        r_c, r_s = cycle_reconstruct(corr, fs, fc)
        l_cyc = cycle_loss(fc, fs, r_c, r_s)
    l_tot = total_loss(l_cont, l_style, l_cyc, weights)
    return l_cont, l_style, l_cyc, l_tot, taps_out


def _check_finite(iteration, **terms):
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NanLoss(iteration, name)


def run_dtp(content, style, cfg, callback=None):
    """Optimize on one image pair; returns (final image, iteration reports).

    content and style are HxWx3 [0,1] arrays of any size; both are
    bilinearly resized to cfg.size.  callback, when given, is invoked
    after every iteration as callback(report, image) with the current
    output as an HxWx3 array; it may fill in report.snapshot_path.

    With iters = 0 the initial generation pass (warped image blended with
    the untrained decoder's residual) is returned and no parameter moves.
    """
    state = _build_state(cfg)
    layers = LayerSet()
    weights = LossWeights(cfg.lambda_c, cfg.lambda_cyc, cfg.tau)

    size = cfg.size
    content_r = resize_bilinear(np.asarray(content), size, size)
    style_r = resize_bilinear(np.asarray(style), size, size)
    content_t = to_nchw(content_r)
    style_t = to_nchw(style_r)
    low = resize_bilinear(style_r, size // 4, size // 4)
    style_low_t = Tensor(np.ascontiguousarray(low.transpose(2, 0, 1)))

    reports = []
    for it in range(1, cfg.iters + 1):
        state.iteration = it
        _refresh_fma_rows(state, cfg)
        with Graph() as g:
            out, taps_c, taps_s, fc, fs, corr = _forward(
                state, cfg, content_t, style_t, style_low_t, layers
            )
            l_cont, l_style, l_cyc, l_tot, _ = _losses(
                state, cfg, out, taps_c, taps_s, fc, fs, corr, layers, weights
            )
        report = IterationReport(
            it, l_cont.item(), l_style.item(), l_cyc.item(), l_tot.item()
        )
        _check_finite(
            it,
            content=report.l_cont,
            style=report.l_style,
            cycle=report.l_cyc,
            total=report.l_total,
        )
        T.backward(g, l_tot)
        # taps past the deepest loss layer (and the decoder under
        # no_generator) never join the graph; they still take their Adam
        # step, with zero gradient
        for _, p in state.adam.params:
            if p.grad is None:
                p.grad = state.zeros_for(p.data.shape, p.data.dtype)
        state.adam.step()
        state.adam.zero_grad()
        state.prev_output = out.data.copy()
        if callback is not None:
            callback(report, from_nchw(out))
        reports.append(report)

    _refresh_fma_rows(state, cfg)
    out, *_ = _forward(state, cfg, content_t, style_t, style_low_t, layers)
    return from_nchw(out), reports
