"""Dense tensors plus reverse-mode automatic differentiation.

The op set covers exactly what the style-transfer pipeline needs; there is
no broadcasting beyond the few fixed patterns below, no views, no graph
rewriting.  A Graph is an append-only tape: ops executed while a Graph is
active (``with Graph() as g:``) record themselves, and ``backward(g, loss)``
replays the tape in exact reverse insertion order, which makes gradient
accumulation order — and therefore every gradient bit — deterministic.

Precision: float32 is the working dtype; float64 is supported end to end so
finite-difference gradient checks can run at full accuracy.
"""

import threading

import numpy as np

from . import _kernels as K
from .errors import ConfigError, GraphError, ShapeMismatch

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Up-to-4-d contiguous float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        a = np.asarray(data)
        if a.dtype not in _ALLOWED:
            a = a.astype(np.float32)
        if a.ndim > 4:
            raise ShapeMismatch(f"tensors are limited to 4 dims, got shape {a.shape}")
        # not ascontiguousarray: that would promote 0-d scalars to 1-d
        self.data = np.asarray(a, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        """Same storage, no gradient tracking."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name, inputs, output, vjp):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_tape = threading.local()


def _stack():
    s = getattr(_tape, "stack", None)
    if s is None:
        s = _tape.stack = []
    return s


def active_graph():
    s = _stack()
    return s[-1] if s else None


class Graph:
    """Append-only op tape; topological order is insertion order."""

    __slots__ = ("nodes", "_produced")

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self, "unbalanced Graph context"
        return False

    def _record(self, name, inputs, output, vjp):
        self.nodes.append(_Node(name, inputs, output, vjp))
        self._produced.add(id(output))


class pause_tape:
    """Context manager that suspends recording (forward-only region)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _apply(name, out_data, inputs, vjp):
    out = Tensor(out_data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._record(name, inputs, out, vjp)
    return out


def custom_op(name, inputs, out_data, vjp):
    """Record a hand-written op (used by the fused losses).

    vjp(grad_out) must return one gradient array (or None) per input, in
    order.
    """
    return _apply(name, out_data, tuple(inputs), vjp)


def backward(graph, loss):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Visits nodes in exact reverse insertion order; fan-out gradients
    accumulate in that fixed order.  Detached branches are skipped.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in graph._produced:
        raise GraphError("loss is not a node of this graph")

    acc = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = acc.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + gi
            else:
                acc[key] = gi
            if key not in graph._produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = acc[key]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def add(a, b):
    _check_same(a, b, "add")

    def vjp(g):
        return g, g

    return _apply("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    _check_same(a, b, "sub")

    def vjp(g):
        return g, -g

    return _apply("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    _check_same(a, b, "mul")

    def vjp(g):
        return g * b.data, g * a.data

    return _apply("mul", a.data * b.data, (a, b), vjp)


def scale(x, s):
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _apply("scale", x.data * s, (x,), vjp)


def add_rowvec(x, v):
    """x: P×C plus a length-C vector broadcast across rows."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"add_rowvec: {tuple(x.shape)} + {tuple(v.shape)}")
    if x.dtype != v.dtype:
        raise ShapeMismatch(f"add_rowvec: dtypes {x.dtype} and {v.dtype} differ")

    def vjp(g):
        return g, g.sum(axis=0)

    return _apply("add_rowvec", x.data + v.data, (x, v), vjp)


def channel_affine(x, ch_scale, ch_shift):
    """Per-channel x*scale + shift on an N×C×H×W tensor; constants only."""
    if x.ndim != 4:
        raise ShapeMismatch(f"channel_affine: need N×C×H×W, got {tuple(x.shape)}")
    c = x.shape[1]
    s = np.asarray(ch_scale, dtype=x.dtype).reshape(c, 1, 1)
    t = np.asarray(ch_shift, dtype=x.dtype).reshape(c, 1, 1)

    def vjp(g):
        return (g * s,)

    return _apply("channel_affine", x.data * s + t, (x,), vjp)


def relu(x):
    def vjp(g):
        return (g * (x.data > 0),)

    return _apply("relu", np.maximum(x.data, 0), (x,), vjp)


def clamp01(x):
    def vjp(g):
        return (g * ((x.data > 0) & (x.data < 1)),)

    return _apply("clamp01", np.clip(x.data, 0.0, 1.0), (x,), vjp)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeMismatch(f"reshape: {tuple(x.shape)} -> {shape} changes element count")
    if len(shape) > 4:
        raise ShapeMismatch(f"reshape: target {shape} exceeds 4 dims")
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _apply("reshape", x.data.reshape(shape), (x,), vjp)


def transpose2d(x):
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose2d: need 2-d, got {tuple(x.shape)}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _apply("transpose2d", np.ascontiguousarray(x.data.T), (x,), vjp)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul: need 2-d operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape[1]} != {b.shape[0]}")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"matmul: dtypes {a.dtype} and {b.dtype} differ")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _apply("matmul", a.data @ b.data, (a, b), vjp)


def softmax_rows(x, scale_):
    """Row softmax of x/scale_, max-subtracted for stability."""
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: need 2-d, got {tuple(x.shape)}")
    scale_ = float(scale_)
    if scale_ <= 0:
        raise ConfigError(f"softmax_rows: scale must be positive, got {scale_}")
    z = x.data / scale_
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        gs = y * (g - (g * y).sum(axis=1, keepdims=True))
        return (gs / scale_,)

    return _apply("softmax_rows", y, (x,), vjp)


def reduce(x, kind, axes=None):
    """Fixed-order sum or mean over the given axes (None = all)."""
    if kind not in ("sum", "mean"):
        raise ConfigError(f"reduce: kind must be sum|mean, got {kind!r}")
    if axes is None:
        axes_t = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes_t = (axes,)
    else:
        axes_t = tuple(int(a) for a in axes)
    for a in axes_t:
        if not 0 <= a < max(x.ndim, 1):
            raise ShapeMismatch(f"reduce: axis {a} out of range for shape {tuple(x.shape)}")
    count = 1
    for a in axes_t:
        count *= x.shape[a]
    y = x.data.sum(axis=axes_t if axes_t else None)
    if kind == "mean":
        y = y / count
    keep = tuple(1 if a in axes_t else s for a, s in enumerate(x.shape))
    inv = 1.0 / count if kind == "mean" else 1.0

    def vjp(g):
        # .copy(): broadcast views are read-only and downstream kernels
        # take writable buffers
        return (np.broadcast_to(np.asarray(g).reshape(keep) * inv, x.shape).copy(),)

    return _apply("reduce", y, (x,), vjp)


def row_normalize(x, eps=1e-8):
    """Rows scaled to unit L2 norm; denominator floored at eps."""
    if x.ndim != 2:
        raise ShapeMismatch(f"row_normalize: need 2-d, got {tuple(x.shape)}")
    n = np.sqrt((x.data * x.data).sum(axis=1))
    d = np.maximum(n, x.dtype.type(eps))
    y = x.data / d[:, None]
    live = (n > eps).astype(x.dtype)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g / d[:, None] - (live / d)[:, None] * y * dot,)

    return _apply("row_normalize", y, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial ops (kernel-backed)


def conv2d(x, w, b, stride=1, pad=1):
    """Cross-correlation with per-output-channel bias (no kernel flip)."""
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeMismatch(
            f"conv2d: need 4d input/weight and 1d bias, got {tuple(x.shape)}, {tuple(w.shape)}, {tuple(b.shape)}"
        )
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if k != k2:
        raise ShapeMismatch(f"conv2d: kernel must be square, got {k}x{k2}")
    if cin != wcin:
        raise ShapeMismatch(f"conv2d: input channels {cin} != weight in-channels {wcin}")
    if b.shape[0] != cout:
        raise ShapeMismatch(f"conv2d: bias length {b.shape[0]} != out channels {cout}")
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise ShapeMismatch("conv2d: operand dtypes differ")
    stride = int(stride)
    pad = int(pad)
    ho, rh = divmod(h + 2 * pad - k, stride)
    wo, rw = divmod(wd + 2 * pad - k, stride)
    ho += 1
    wo += 1
    if rh or rw or ho <= 0 or wo <= 0:
        raise ShapeMismatch(
            f"conv2d: output extent ({ho}x{wo}, remainders {rh},{rw}) invalid for input {h}x{wd}, k={k}, stride={stride}, pad={pad}"
        )

    w2 = w.data.reshape(cout, cin * k * k)
    col = K.im2col(x.data, k, stride, pad)
    out2 = w2 @ col
    out2 += b.data[:, None]
    y = np.ascontiguousarray(out2.reshape(cout, n, ho * wo).transpose(1, 0, 2)).reshape(
        n, cout, ho, wo
    )

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        col_b = K.im2col(x.data, k, stride, pad)  # recomputed: cheaper than saving
        gw = (g2 @ col_b.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gx = K.col2im(w2.T @ g2, x.shape, k, stride, pad)
        return gx, gw, gb

    return _apply("conv2d", y, (x, w, b), vjp)


def maxpool2d_2x2(x):
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d_2x2: need N×C×H×W, got {tuple(x.shape)}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatch(f"maxpool2d_2x2: odd spatial extent in {tuple(x.shape)}")
    y, idx = K.maxpool2x2_forward(x.data)

    def vjp(g):
        return (K.maxpool2x2_backward(np.ascontiguousarray(g), idx),)

    return _apply("maxpool2d_2x2", y, (x,), vjp)


def upsample_bilinear_2x(x):
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample_bilinear_2x: need N×C×H×W, got {tuple(x.shape)}")

    def vjp(g):
        return (K.upsample2x_backward(np.ascontiguousarray(g)),)

    return _apply("upsample_bilinear_2x", K.upsample2x_forward(x.data), (x,), vjp)


def take_rows(x, idx):
    """Gather rows of a 2-d tensor by integer index (rows may repeat)."""
    if x.ndim != 2:
        raise ShapeMismatch(f"take_rows: need a 2-d tensor, got {tuple(x.shape)}")
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ShapeMismatch(f"take_rows: need a 1-d index, got {idx.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _apply("take_rows", x.data[idx], (x,), vjp)


def im2col_patches(x, k, stride=1, pad=0):
    """Unfold k×k patches into a (C·k·k)×L matrix (single image, N=1)."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeMismatch(f"im2col_patches: need 1×C×H×W, got {tuple(x.shape)}")
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeMismatch(f"im2col_patches: patch {k} larger than feature map {tuple(x.shape)}")
    shape = x.shape

    def vjp(g):
        return (K.col2im(np.ascontiguousarray(g), shape, k, stride, pad),)

    return _apply("im2col_patches", K.im2col(x.data, k, stride, pad), (x,), vjp)
