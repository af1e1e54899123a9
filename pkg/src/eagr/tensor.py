"""Dense float64 tensors with tape-based reverse-mode autodiff and MAC accounting.

Operations are plain functions. When a :class:`Tape` is active and any
operand requires a gradient, the operation appends a node (operands, saved
activations, backward rule) to that tape; :func:`backward` walks the tape in
reverse. Matrix products and convolutions report their multiply-accumulate
count to every active :class:`FlopCounter`.
"""

import io
import struct
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, ParseError

_state = threading.local()


def _stack(name):
    stack = getattr(_state, name, None)
    if stack is None:
        stack = []
        setattr(_state, name, stack)
    return stack


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    ``grad`` accumulates across calls to :func:`backward` until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward pass; nodes are appended in
    execution order, so operands always precede the nodes that consume them.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


class FlopCounter:
    """Multiply-accumulate tally for every matmul/convolution run while active."""

    def __init__(self):
        self.mac_count = 0
        self.breakdown = {}

    def add(self, key, macs):
        self.mac_count += macs
        self.breakdown[key] = self.breakdown.get(key, 0) + macs

    def reset(self):
        self.mac_count = 0
        self.breakdown = {}

    def total(self, prefix=""):
        """Sum of all breakdown entries whose key starts with ``prefix``."""
        return sum(v for k, v in self.breakdown.items() if k.startswith(prefix))

    def __enter__(self):
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc):
        _stack("counters").remove(self)
        return False


def _count(key, macs):
    for counter in _stack("counters"):
        counter.add(key, int(macs))


def _result(arr, inputs, backward_fn, op):
    if not np.isfinite(arr).all():
        raise DomainError(f"{op} produced a non-finite value")
    out = Tensor._wrap(arr)
    tapes = _stack("tapes")
    if tapes and any(t.requires_grad for t in inputs):
        tape = tapes[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss, leaves=()):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves that the loss does not depend on (including any passed explicitly
    through ``leaves``) receive zero gradients. The tape is consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape.consumed or not tape.nodes:
        raise ContractError("loss has no recorded history; run the forward pass inside a Tape")

    produced = {id(node.output) for node in tape.nodes}
    leaf_list = []
    seen = set()
    for t in [*(i for n in tape.nodes for i in n.inputs), *leaves]:
        if t.requires_grad and id(t) not in produced and id(t) not in seen:
            seen.add(id(t))
            leaf_list.append(t)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    for leaf in leaf_list:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    tape.nodes.clear()
    tape.consumed = True


def _need(t, ndim, op):
    if t.ndim != ndim:
        raise DimensionError(f"{op} expects a rank-{ndim} tensor, got shape {t.shape}")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b, tag="matmul"):
    _need(a, 2, "matmul")
    _need(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _count(tag, m * k * n)
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), back, "matmul")


def transpose(a):
    _need(a, 2, "transpose")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def conv1x1(x, w, bias, tag="conv1x1"):
    """Pointwise convolution on a flattened ``HW x Cin`` map: ``x @ w + bias``."""
    _need(x, 2, "conv1x1")
    _need(w, 2, "conv1x1")
    if x.shape[1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise DimensionError(
            f"conv1x1 shapes inconsistent: x {x.shape}, w {w.shape}, bias {bias.shape}"
        )
    _count(tag, x.shape[0] * w.shape[0] * w.shape[1])
    X, W = x.data, w.data

    def back(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _result(X @ W + bias.data, (x, w, bias), back, "conv1x1")


def conv3x3(x, w, bias, stride=1, tag="conv3x3"):
    """3x3 convolution with zero padding 1 on an ``H x W x Cin`` map.

    ``w`` has shape ``3 x 3 x Cin x Cout``. Output extent is ``ceil(H / stride)``.
    """
    _need(x, 3, "conv3x3")
    if stride not in (1, 2):
        raise ContractError(f"conv3x3 stride must be 1 or 2, got {stride}")
    H, W, cin = x.shape
    if w.shape[:3] != (3, 3, cin) or w.ndim != 4 or bias.shape != (w.shape[3],):
        raise DimensionError(
            f"conv3x3 shapes inconsistent: x {x.shape}, w {w.shape}, bias {bias.shape}"
        )
    cout = w.shape[3]
    hout = (H - 1) // stride + 1
    wout = (W - 1) // stride + 1
    _count(tag, hout * wout * 9 * cin * cout)

    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::stride, ::stride]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(hout * wout, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = (cols @ wmat + bias.data).reshape(hout, wout, cout)

    def back(g):
        g2 = g.reshape(hout * wout, cout)
        gw = (cols.T @ g2).reshape(3, 3, cin, cout)
        gcols = (g2 @ wmat.T).reshape(hout, wout, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                gxp[
                    ki : ki + stride * (hout - 1) + 1 : stride,
                    kj : kj + stride * (wout - 1) + 1 : stride,
                ] += gcols[:, :, ki, kj, :]
        return gxp[1:-1, 1:-1], gw, g2.sum(axis=0)

    return _result(out, (x, w, bias), back, "conv3x3")


# --------------------------------------------------------------------------
# normalisation, pooling, resampling


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor, stabilised by subtracting each row max."""
    _need(x, 2, "softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), back, "softmax_rows")


def hadamard(a, b):
    """Elementwise product; ``b`` may have trailing extent 1 (broadcast across columns)."""
    broadcast = b.shape != a.shape
    if broadcast and not (
        a.ndim == b.ndim and b.shape[-1] == 1 and b.shape[:-1] == a.shape[:-1]
    ):
        raise DimensionError(f"hadamard shapes incompatible: {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def back(g):
        gb = g * A
        if broadcast:
            gb = gb.sum(axis=-1, keepdims=True)
        return g * B, gb

    return _result(A * B, (a, b), back, "hadamard")


def _bins(n, p):
    return [(i * n // p, (i + 1) * n // p) for i in range(p)]


def adaptive_avg_pool(x, grid):
    """Average ``H x W x T`` into a ``Ph x Pw`` grid of bins, per channel.

    Bin ``(i, j)`` spans rows ``[i*H//Ph, (i+1)*H//Ph)`` and the analogous columns.
    """
    _need(x, 3, "adaptive_avg_pool")
    H, W, T = x.shape
    ph, pw = grid
    if not (1 <= ph <= H and 1 <= pw <= W):
        raise DimensionError(f"pool grid {grid} does not fit input {x.shape}")
    rows, cols = _bins(H, ph), _bins(W, pw)
    X = x.data
    out = np.empty((ph, pw, T))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = X[r0:r1, c0:c1].sum(axis=(0, 1)) / ((r1 - r0) * (c1 - c0))

    def back(g):
        gx = np.empty_like(X)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[r0:r1, c0:c1] = g[i, j] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return _result(out, (x,), back, "adaptive_avg_pool")


def upsample_nearest(x, factor):
    _need(x, 3, "upsample_nearest")
    if int(factor) != factor or factor < 1:
        raise ContractError(f"upsample factor must be a positive integer, got {factor}")
    f = int(factor)
    H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=0), f, axis=1)

    def back(g):
        return (g.reshape(H, f, W, f, C).sum(axis=(1, 3)),)

    return _result(out, (x,), back, "upsample_nearest")


def subsample(x, factor):
    """Nearest-neighbour downsampling of ``H x W x C``: keeps pixel ``(f*i, f*j)``."""
    _need(x, 3, "subsample")
    f = int(factor)
    X = x.data

    def back(g):
        gx = np.zeros_like(X)
        gx[::f, ::f] = g
        return (gx,)

    return _result(X[::f, ::f].copy(), (x,), back, "subsample")


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_channels leading extents differ: {a.shape} and {b.shape}")
    ca = a.shape[-1]

    def back(g):
        return g[..., :ca], g[..., ca:]

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), back, "concat_channels")


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take(x, indices, axis=0):
    """Gather entries along ``axis`` (gradient scatters back, summing repeats)."""
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take indices out of range for axis {axis} of {x.shape}")
    X = x.data

    def back(g):
        gx = np.zeros_like(X)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _result(np.take(X, idx, axis=axis), (x,), back, "take")


# --------------------------------------------------------------------------
# elementwise


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, k):
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,), "scale")


def sum_all(x):
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum_all")


def log(x):
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive value")
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,), "log")


def clamp_min(x, lo):
    """``max(x, lo)``; the gradient is zero where the clamp is active."""
    keep = x.data >= lo
    return _result(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


# --------------------------------------------------------------------------
# serialisation

TENSOR_MAGIC = b"EAGT"
TENSOR_VERSION = 1


def write_tensor(t, fh):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n, what):
    start = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", start + len(buf))
    return buf


def read_tensor(fh, requires_grad=False):
    start = fh.tell()
    if _read_exact(fh, 4, "tensor magic") != TENSOR_MAGIC:
        raise ParseError("bad tensor magic", start)
    version, rank = struct.unpack("<II", _read_exact(fh, 8, "tensor header"))
    if version != TENSOR_VERSION:
        raise ParseError(f"unsupported tensor version {version}", start + 4)
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor extents"))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count, "tensor data"), dtype="<f8")
    return Tensor(data.astype(np.float64).reshape(shape), requires_grad=requires_grad)


def tensor_to_bytes(t):
    buf = io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


def tensor_from_bytes(raw):
    return read_tensor(io.BytesIO(raw))
