"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient, so inference outside a tape costs no bookkeeping::

    with Tape() as tape:
        loss = mean(square(x))
    tape.backward(loss)
    x.grad  # d loss / d x

Images use (batch, channel, height, width) layout throughout.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape becomes active inside a ``with`` block. Each tape supports exactly
    one backward pass; a second call raises :class:`TapeError`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(out))
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.requires_grad and id(loss) not in self._produced:
            self._leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
        self.nodes = []
        self._produced = set()
        self._leaves = {}


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape}")
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# activations ---------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - dot),)

    return _result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(z.dtype)
    out = z - lse
    p = np.exp(out)

    def bw(g):
        gs = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (g - p * gs,)

    return _result(out, (a,), bw)


def clamp(a, low: float = 0.0, high: float = 1.0) -> Tensor:
    """Clip to [low, high]; gradient is zero where the clip is active."""
    a = as_tensor(a)
    mask = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,))


# reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    return _result(np.asarray(out), (a,),
                   lambda g: (np.array(_expand(g, shape, axes, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    return _result(np.asarray(out), (a,),
                   lambda g: (np.array(_expand(g / n, shape, axes, keepdims)),))


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient flows to the first argmax."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), bw)


def l2_norm(a) -> Tensor:
    """Euclidean norm of all elements; subgradient zero at the origin."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(np.square(a.data, dtype=np.float64)))
    out = np.asarray(n, dtype=a.dtype)
    ad = a.data

    def bw(g):
        if n == 0:
            return (np.zeros_like(ad),)
        return ((g * ad / n).astype(ad.dtype),)

    return _result(out, (a,), bw)


# shape manipulation --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    shape, dt = a.shape, a.dtype

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in idx)

    def bw(g):
        ga = np.zeros(shape, dtype=dt)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _result(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean/float ``mask`` is set, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask)
    sa, sb = a.shape, b.shape
    out = np.where(m, a.data, b.data)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(m, g, 0), sa),
                              _unbroadcast(np.where(m, 0, g), sb)))


# convolution ---------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    # (N, Ho, Wo, C, k, k) -> rows
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1 or k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=np.result_type(gcols, xp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0, dtype=np.float64).astype(gm.dtype))
        return tuple(grads)

    return _result(out, inputs, bw)


def upsample_nearest(x, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    x = as_tensor(x)
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _result(out, (x,),
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


# randomness ----------------------------------------------------------------

def rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def tensor_uniform(shape, low: float, high: float, seed: int) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    if not low < high:
        raise ValueError(f"need low < high, got [{low}, {high})")
    u = rng(seed).random(shape)
    vals = (low + (high - low) * u).astype(DTYPE)
    # float32 rounding can land on the open upper bound
    top = np.nextafter(np.float32(high), np.float32(low))
    return Tensor(np.minimum(vals, top))


# checking ------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Both sides are evaluated in float64. Per component the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = fn(xt)
    tape.backward(loss)
    analytic = xt.grad.astype(np.float64)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(fn(Tensor(base, dtype=np.float64)).data, dtype=np.float64).sum())
        flat[i] = orig - h
        fm = float(np.asarray(fn(Tensor(base, dtype=np.float64)).data, dtype=np.float64).sum())
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


# ATSR serialization ----------------------------------------------------------

ATSR_MAGIC = b"ATSR"
ATSR_VERSION = 1


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(as_tensor(t).data, dtype="<f4")
    head = ATSR_MAGIC + struct.pack("<HB", ATSR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one ATSR block starting at ``offset``; returns (tensor, new offset)."""
    try:
        if buf[offset : offset + 4] != ATSR_MAGIC:
            raise FormatError("bad ATSR magic")
        version, rank = struct.unpack_from("<HB", buf, offset + 4)
        if version != ATSR_VERSION:
            raise FormatError(f"unsupported ATSR version {version}")
        pos = offset + 7
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(buf):
            raise FormatError("truncated ATSR payload")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    except struct.error as exc:
        raise FormatError(f"truncated ATSR header: {exc}") from None
    return Tensor(arr.astype(DTYPE)), pos + nbytes


def save_tensor(t, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after ATSR payload")
    return t
