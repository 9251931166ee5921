"""Dense tensors with reverse-mode automatic differentiation.

Operations executed inside an active :class:`Graph` are recorded when any
input requires a gradient; :func:`backward` walks the record in reverse.
Outside a graph every op is a plain numpy computation, which is how the key
encoder runs.
"""
from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = False

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Tensor:
    """n-d float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Execution record of one forward pass.

    Use as a context manager; ops run inside the block are appended in
    execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: set[int] = set()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._ids.add(id(node.output))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False


def _graph_stack() -> list[Graph]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording, e.g. for the key network."""
    stack = _graph_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    g = active_graph()
    track = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        g.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain scalars/arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.maximum(x.data, 0), (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", np.asarray(out), (x,), bw)


def mean_pool(x, axis=-2) -> Tensor:
    """Average over the token axis of a (..., N, D) tensor."""
    return mean(x, axis=axis)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def take(x, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None),) * (axis % x.ndim) + (index,), g)
        return (out,)

    return _make("take", np.take(x.data, index, axis=axis), (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, channels-last.

    ``x`` is (B, H, W, C), ``weight`` is (kh, kw, C, O); zero padding and a
    single stride, no dilation or groups.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, _, O = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def window(arr, i, j):
        return arr[:, i:i + stride * (OH - 1) + 1:stride, j:j + stride * (OW - 1) + 1:stride]

    if kh == kw == stride and padding == 0:
        # non-overlapping patches: columns are a reshape of the image
        cols = (xp[:, :OH * kh, :OW * kw].reshape(B, OH, kh, OW, kw, C)
                .transpose(0, 1, 3, 2, 4, 5).reshape(B * OH * OW, kh * kw * C))
    else:
        cols = np.stack([window(xp, i, j) for i, j in taps], axis=3).reshape(B * OH * OW, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * C, O)
    out = (cols @ wmat).reshape(B, OH, OW, O)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.reshape(B * OH * OW, O)
        gw = (cols.T @ gmat).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(B, OH, OW, kh, kw, C)
            if kh == kw == stride and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :OH * kh, :OW * kw] = gcols.transpose(0, 1, 3, 2, 4, 5).reshape(B, OH * kh, OW * kw, C)
            else:
                gxp = np.zeros_like(xp)
                for i, j in taps:
                    window(gxp, i, j)[...] += gcols[:, :, :, i, j]
                gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make("conv2d", out, inputs, bw)


# ---------------------------------------------------------------- normalization

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax; entries where ``mask`` is False are excluded from the
    normalizer and receive zero gradient (their output is set to 0)."""
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    masked = np.where(mask, x.data, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    p = e / s
    out = np.where(mask, x.data - m - np.log(s), 0.0)

    def bw(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    inputs = [x]
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        inputs.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)
    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make("layer_norm", out, inputs, bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / (||x|| + eps)``; defined (zero) for a zero vector."""
    x = as_tensor(x)
    r = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    n = r + eps
    out = x.data / n

    def bw(g):
        proj = (g * x.data).sum(axis=axis, keepdims=True)
        safe_r = np.where(r > 0, r, 1.0)
        return (g / n - x.data * proj / (n * n * safe_r),)

    return _make("l2_normalize", out, (x,), bw)


# ---------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf touched by ``graph``.

    Gradients from this pass overwrite earlier ones. Leaves that do not lie
    on a path to ``loss`` receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not graph.contains(loss):
        raise ValueError("backward: loss was not produced inside this graph")
    produced = {id(n.output) for n in graph.nodes}
    leaves: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SPMX"
VERSION = 1


def save_tensors(path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Write named tensors in the flat little-endian float64 checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in tensors:
            arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name],
                             dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return out


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
