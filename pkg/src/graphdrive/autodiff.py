"""Dense-tensor engine with reverse-mode autodiff on an explicit tape.

Tensors wrap contiguous numpy arrays (float64 by default, float32 via the
dtype argument). Primitives compute eagerly; when an active Tape is present
and any input requires a gradient, the op is recorded so Tape.backward can
replay the chain rule in reverse topological order.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; scalars are folded in as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Inputs of an op always precede it (define-by-run), so the reverse sweep
    visits each op exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        for t in inputs:
            tid = id(t)
            if t.requires_grad and tid not in self._produced and tid not in self._leaf_ids:
                self._leaf_ids.add(tid)
                self._leaves.append(t)
        self._produced.add(id(out))
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns a gradient per requires_grad leaf seen on this tape (zeros for
        leaves the loss does not reach) and mirrors them onto Tensor.grad.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + gi
                else:
                    grads[tid] = gi
        result: dict[Tensor, np.ndarray] = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            result[leaf] = g
        return result


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data + c, (x,), lambda g: (g,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)
    return _make(out_data, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    out_data = np.where(x.data > 0, x.data, slope * x.data)
    return _make(out_data, (x,),
                 lambda g: (g * np.where(x.data > 0, 1.0, slope),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return _make(out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),))


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    return _make(out_data, (x,), lambda g: (g * (1.0 - out_data * out_data),))


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _make(out_data, (x,), lambda g: (g * out_data,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _make(out_data, (x,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out_data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs 2D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or (a.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: batch dims must match exactly, {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x_shape
    oh, ow = cols.shape[-2:]
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCkk kernels; zero padding only."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d needs NCHW input and OCHW kernel, got {x.shape}, {w.shape}")
    n, c, h, w_in = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if h + 2 * padding < kh or w_in + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = np.matmul(wmat, cols2).reshape(n, o, oh, ow)
    if b is not None:
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
        out_data += b.data.reshape(1, o, 1, 1)

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(n, o, oh * ow))
        gw = np.matmul(gmat, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)
        gx = _col2im(gcols.reshape(n, c, kh, kw, oh, ow), x.shape, kh, kw, stride, padding)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(out_data, inputs, backward)


def upsample_nn(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor upsample of the last two axes to (out_h, out_w)."""
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_nn: target ({out_h},{out_w}) smaller than input ({h},{w})")
    ys = (np.arange(out_h) * h) // out_h
    xs = (np.arange(out_w) * w) // out_w
    out_data = np.ascontiguousarray(x.data[..., ys, :][..., :, xs])
    h_starts = np.searchsorted(ys, np.arange(h), side="left")
    w_starts = np.searchsorted(xs, np.arange(w), side="left")

    def backward(g):
        g = np.add.reduceat(g, h_starts, axis=-2)
        g = np.add.reduceat(g, w_starts, axis=-1)
        return (np.ascontiguousarray(g),)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# generic dispatch

_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "shift": shift, "power": power, "relu": relu, "leaky_relu": leaky_relu,
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "abs": absolute,
    "softmax": softmax, "sum": sum_, "mean": mean, "reshape": reshape,
    "transpose": transpose, "concat": concat, "narrow": narrow,
    "matmul": matmul, "conv2d": conv2d, "upsample_nn": upsample_nn,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name. Unknown kinds are rejected."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_OPS)}")
    return fn(*args, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(sorted(_OPS))
