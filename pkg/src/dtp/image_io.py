"""PNG decode/encode, bilinear resize, and the SSIM metric.

An image is an HxWx3 float32 array with values in [0, 1], RGB order.
Bytes map to floats by b/255; saving quantizes by round(x*255) after
clamping to [0, 1].
"""

import numpy as np
from PIL import Image as _PILImage

from .errors import ImageError, ShapeMismatch
from .tensor import Tensor

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# IHDR color types that decode to the channels we accept
_COLOR_TYPES = {2: "RGB", 6: "RGBA"}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _read_ihdr(path):
    """(bit_depth, color_type) from the PNG header, without decoding."""
    try:
        with open(path, "rb") as f:
            head = f.read(26)
    except OSError as e:
        raise ImageError(f"cannot read {path}: {e}") from e
    if len(head) < 26 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageError(f"{path} is not a PNG file")
    return head[24], head[25]


def load_png(path):
    """8-bit RGB or RGBA PNG -> HxWx3 float32 in [0,1]; alpha is dropped."""
    depth, color = _read_ihdr(path)
    if depth != 8:
        raise ImageError(f"{path}: unsupported bit depth {depth} (need 8)")
    if color not in _COLOR_TYPES:
        raise ImageError(
            f"{path}: unsupported color type {color} (need RGB or RGBA)"
        )
    try:
        with _PILImage.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise ImageError(f"cannot decode {path}: {e}") from e
    return (arr[:, :, :3] / np.float32(255.0)).astype(np.float32)


def save_png(img, path):
    """Quantize round(x*255) after clamping to [0,1] and write RGB PNG."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatch(f"save_png: need H×W×3, got {a.shape}")
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    _PILImage.fromarray(q, "RGB").save(path, format="PNG")


def _axis_taps(n_in, n_out):
    """Half-pixel-center source taps: indices i0, i1 and the i1 weight."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    w1 = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, w1


def resize_bilinear(img, out_h, out_w):
    """Separable half-pixel-center bilinear resize with edge clamping.

    Blending runs in float64, so outputs never leave the input's value
    range; the result is cast back to float32.
    """
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatch(f"resize_bilinear: need H×W×3, got {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ImageError(f"resize_bilinear: bad output size {out_h}×{out_w}")
    x = a.astype(np.float64)
    i0, i1, w1 = _axis_taps(a.shape[0], out_h)
    x = x[i0] * (1.0 - w1)[:, None, None] + x[i1] * w1[:, None, None]
    j0, j1, v1 = _axis_taps(a.shape[1], out_w)
    x = x[:, j0] * (1.0 - v1)[None, :, None] + x[:, j1] * v1[None, :, None]
    return x.astype(np.float32)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 1-d Gaussian taps."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _windowed_mean(x, g):
    """Valid-region separable correlation of HxWxC with g (both axes)."""
    w = np.lib.stride_tricks.sliding_window_view(x, g.size, axis=0)
    x = w @ g
    w = np.lib.stride_tricks.sliding_window_view(x, g.size, axis=1)
    return w @ g


def ssim(a, b):
    """Mean structural similarity over valid 11x11 Gaussian windows.

    sigma = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1; computed per
    channel then averaged.  ssim(x, x) is exactly 1.0.
    """
    x = np.asarray(a, np.float64)
    y = np.asarray(b, np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim: shapes {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeMismatch(f"ssim: need H×W×3, got {x.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ImageError(
            f"ssim: image {x.shape[0]}×{x.shape[1]} smaller than the "
            f"{SSIM_WINDOW}×{SSIM_WINDOW} window"
        )
    g = gaussian_window()
    mx = _windowed_mean(x, g)
    my = _windowed_mean(y, g)
    sxx = _windowed_mean(x * x, g) - mx * mx
    syy = _windowed_mean(y * y, g) - my * my
    sxy = _windowed_mean(x * y, g) - mx * my
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def to_nchw(img):
    """HxWx3 [0,1] array -> 1x3xHxW float32 Tensor."""
    a = np.asarray(img, np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeMismatch(f"to_nchw: need H×W×3, got {a.shape}")
    return Tensor(np.ascontiguousarray(a.transpose(2, 0, 1))[None])


def from_nchw(t):
    """1x3xHxW Tensor -> HxWx3 float32 array (no clamping)."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeMismatch(f"from_nchw: need 1×3×H×W, got {tuple(t.shape)}")
    return np.ascontiguousarray(t.data[0].transpose(1, 2, 0))
