"""Encoder and decoder networks.

The encoder is a VGG-19-shaped stack, conv1_1 through conv5_2, every conv
3x3/stride 1/pad 1 followed by ReLU, with 2x2 max pools after conv1_2,
conv2_2, conv3_4 and conv4_4.  Taps are the post-ReLU outputs, named
relu1_1 ... relu5_2.

The decoder mirrors the encoder from the correlation tap's width (256
channels) back to RGB: three convs, x2 upsample, three convs, x2 upsample,
five convs; the last conv is linear so the residual it produces is signed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dtpw import WeightStore
from .errors import ConfigError, ShapeMismatch, WeightStoreMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    followed_by_relu: bool = True


def _block(prefix, widths):
    """conv specs for one block: widths = [in, out, out, ...]."""
    return [
        ConvSpec(f"{prefix}_{i + 1}", widths[i], widths[i + 1])
        for i in range(len(widths) - 1)
    ]


ENCODER_LAYERS = (
    _block("conv1", [3, 64, 64])
    + ["pool"]
    + _block("conv2", [64, 128, 128])
    + ["pool"]
    + _block("conv3", [128, 256, 256, 256, 256])
    + ["pool"]
    + _block("conv4", [256, 512, 512, 512, 512])
    + ["pool"]
    + _block("conv5", [512, 512, 512])[:2]
)

# Channel plan 256->256->256->128 |up| 128->128->128->64 |up| 64->64->32->32->32->3.
DECODER_LAYERS = [
    ConvSpec("dec4_3", 256, 256),
    ConvSpec("dec4_2", 256, 256),
    ConvSpec("dec4_1", 256, 128),
    "up",
    ConvSpec("dec3_3", 128, 128),
    ConvSpec("dec3_2", 128, 128),
    ConvSpec("dec3_1", 128, 64),
    "up",
    ConvSpec("dec2_2", 64, 64),
    ConvSpec("dec2_1", 64, 32),
    ConvSpec("dec1_3", 32, 32),
    ConvSpec("dec1_2", 32, 32),
    ConvSpec("dec1_1", 32, 3, followed_by_relu=False),
]

ENCODER_TAPS = tuple(
    "relu" + s.name[4:] for s in ENCODER_LAYERS if isinstance(s, ConvSpec)
)


def _random_conv(rng, spec):
    fan_in = spec.in_ch * spec.kernel * spec.kernel
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
    return w.astype(np.float32), np.zeros(spec.out_ch, np.float32)


def _params_from_store(layers, store):
    params = {}
    for spec in layers:
        if not isinstance(spec, ConvSpec):
            continue
        want_w = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        want_b = (spec.out_ch,)
        pair = []
        for suffix, want in ((".weight", want_w), (".bias", want_b)):
            key = spec.name + suffix
            if key not in store:
                raise WeightStoreMismatch(f"weight store is missing {key!r}")
            a = store[key]
            if tuple(a.shape) != want:
                raise WeightStoreMismatch(
                    f"{key!r}: store shape {tuple(a.shape)} != expected {want}"
                )
            pair.append(np.ascontiguousarray(a, dtype=np.float32))
        params[spec.name] = (
            Tensor(pair[0], requires_grad=True),
            Tensor(pair[1], requires_grad=True),
        )
    return params


def _random_params(layers, rng, zero_final=False):
    convs = [s for s in layers if isinstance(s, ConvSpec)]
    zeroed = convs[-1].name if zero_final else None
    params = {}
    for spec in layers:
        if isinstance(spec, ConvSpec):
            if spec.name == zeroed:
                w = np.zeros(
                    (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), np.float32
                )
                b = np.zeros(spec.out_ch, np.float32)
            else:
                w, b = _random_conv(rng, spec)
            params[spec.name] = (
                Tensor(w, requires_grad=True),
                Tensor(b, requires_grad=True),
            )
    return params


class _ConvStack:
    layers = ()

    def __init__(self, params):
        self.params = params

    def parameters(self):
        """(name, tensor) pairs in layer order; the optimizer relies on it."""
        out = []
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                w, b = self.params[spec.name]
                out.append((spec.name + ".weight", w))
                out.append((spec.name + ".bias", b))
        return out

    def to_store(self):
        store = WeightStore()
        for name, t in self.parameters():
            store.add(name, t.data)
        return store


class Encoder(_ConvStack):
    layers = ENCODER_LAYERS
    taps = frozenset(ENCODER_TAPS)

    def forward(self, image, taps):
        """Run until the deepest requested tap; returns {tap_name: Tensor}."""
        wanted = set(taps)
        unknown = wanted - self.taps
        if unknown:
            raise ConfigError(f"unknown encoder taps: {sorted(unknown)}")
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeMismatch(f"encode: need 1×3×H×W input, got {tuple(image.shape)}")
        if image.shape[2] % 16 or image.shape[3] % 16:
            raise ShapeMismatch(
                f"encode: spatial extents {image.shape[2]}×{image.shape[3]} not divisible by 16"
            )
        out = {}
        x = image
        for spec in self.layers:
            if spec == "pool":
                x = T.maxpool2d_2x2(x)
                continue
            w, b = self.params[spec.name]
            x = T.relu(T.conv2d(x, w, b, spec.stride, spec.pad))
            tap = "relu" + spec.name[4:]
            if tap in wanted:
                out[tap] = x
                if len(out) == len(wanted):
                    break
        return out


class Decoder(_ConvStack):
    layers = DECODER_LAYERS

    def forward(self, feature):
        """256-channel feature at size/4 -> signed RGB residual at full size."""
        first = self.layers[0]
        if feature.ndim != 4 or feature.shape[1] != first.in_ch:
            raise ShapeMismatch(
                f"decode: need 1×{first.in_ch}×h×w input, got {tuple(feature.shape)}"
            )
        x = feature
        for spec in self.layers:
            if spec == "up":
                x = T.upsample_bilinear_2x(x)
                continue
            w, b = self.params[spec.name]
            x = T.conv2d(x, w, b, spec.stride, spec.pad)
            if spec.followed_by_relu:
                x = T.relu(x)
        return x


def build_encoder(weights=None, rng=None):
    """Encoder from a WeightStore, or randomly initialized from rng.

    Random weights are U(-b, b) with b = sqrt(6 / fan_in), zero biases,
    drawn in layer order.  Store tensors are cast to float32 (the working
    precision).  Extra names in the store are ignored.
    """
    if weights is not None:
        return Encoder(_params_from_store(ENCODER_LAYERS, weights))
    if rng is None:
        raise ConfigError("build_encoder: need a weight store or an rng")
    return Encoder(_random_params(ENCODER_LAYERS, rng))


def build_decoder(rng):
    """Decoder is always randomly initialized.

    Hidden convs use the encoder's scheme; the final conv starts at zero,
    so a fresh decoder emits no residual and the first blended output is
    the warped image alone.  Training grows the residual from there.
    """
    return Decoder(_random_params(DECODER_LAYERS, rng, zero_final=True))
