"""Small reverse-mode autodiff over dense numpy arrays.

Images are channel-last (H, W, C). Operations record themselves on the
active :class:`Tape` when at least one input requires a gradient; outside a
tape they are plain numpy evaluations.

Storage is float32. ``check_mode()`` switches newly created tensors to
float64 so gradients can be compared against finite differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "broadcast_planes",
    "channel_mean",
    "check_mode",
    "concat_channels",
    "conv2d",
    "default_dtype",
    "downsample2",
    "mse_loss",
    "mul",
    "relu",
    "sigmoid",
    "sub",
    "tensor_sum",
    "upsample2",
    "zero_grad",
]

_DTYPE = np.float32
_ACTIVE_TAPE: Optional["Tape"] = None


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def check_mode():
    """Create float64 tensors inside the block (gradient verification only)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "out", "inputs", "grad_fn")

    def __init__(self, kind, out, inputs, grad_fn):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; leaving the block clears the tape, after which
    tensors produced on it can no longer be back-propagated.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.cleared = False
        self._prev: Optional[Tape] = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self.clear()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes = []
        self.cleared = True

    def record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable):
        out.tape = self
        out.node = len(self.nodes)
        self.nodes.append(_Node(kind, out, tuple(inputs), grad_fn))


def _finish(kind: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(kind, out, inputs, grad_fn)
    return out


def _check_binary(a: Tensor, b: Tensor, kind: str):
    if b.data.ndim != 0 and a.data.shape != b.data.shape:
        raise ValueError(f"{kind}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def grad_fn(g):
        return g, _reduce_to(g, b)

    return _finish("add", a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def grad_fn(g):
        return g, _reduce_to(-g, b)

    return _finish("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, _reduce_to(g * ad, b)

    return _finish("mul", ad * bd, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _finish("relu", x.data * mask, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)

    def grad_fn(g):
        return (g * s * (1 - s),)

    return _finish("sigmoid", s, (x,), grad_fn)


def logit(x: Tensor, eps: float = 1e-3) -> Tensor:
    """log(x / (1 - x)) on x clipped to [eps, 1 - eps]; zero gradient where clipped."""
    xd = x.data
    inside = (xd >= eps) & (xd <= 1 - eps)
    c = np.clip(xd, eps, 1 - eps)
    out = (np.log(c) - np.log1p(-c)).astype(xd.dtype)

    def grad_fn(g):
        return (g * inside / (c * (1 - c)),)

    return _finish("logit", out, (x,), grad_fn)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows of (ky, kx, c)-ordered patches, one per output pixel."""
    h, w, c = x.shape
    if k == 1:
        return x.reshape(h * w, c)
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    cols = np.empty((h, w, k, k, c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx, :] = xp[ky:ky + h, kx:kx + w, :]
    return cols.reshape(h * w, k * k * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero 'same' padded cross-correlation.

    ``x`` is H x W x Cin, ``kernel`` K x K x Cin x Cout (K odd), ``bias`` Cout.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d expects H x W x C input, got {x.data.shape}")
    k, k2, cin, cout = kernel.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd and square, got {kernel.data.shape}")
    h, w, c = x.data.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.data.shape} != ({cout},)")

    cols = _im2col(x.data, k)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(h, w, cout)

    def grad_fn(g):
        g2 = g.reshape(h * w, cout)
        gx = gk = gb = None
        if x.requires_grad:
            # correlation of the output grad with the flipped, in/out-swapped kernel
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (_im2col(g, k) @ flipped).reshape(h, w, cin)
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(k, k, cin, cout)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _finish("conv2d", out, (x, kernel, bias), grad_fn)


def downsample2(x: Tensor) -> Tensor:
    """2x2 mean pooling."""
    h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2 needs even extents, got {h}x{w}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * np.asarray(0.25, g.dtype),)

    return _finish("downsample2", out, (x,), grad_fn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.data.shape

    def grad_fn(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return _finish("upsample2", out, (x,), grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ValueError(f"concat_channels: spatial mismatch {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[2]

    def grad_fn(g):
        return g[..., :ca], g[..., ca:]

    return _finish("concat", np.concatenate([a.data, b.data], axis=2), (a, b), grad_fn)


def channel_mean(x: Tensor) -> Tensor:
    """Spatial mean per channel: H x W x C -> (C,)."""
    h, w, c = x.data.shape
    n = h * w

    def grad_fn(g):
        return (np.broadcast_to(g / n, (h, w, c)).astype(g.dtype),)

    return _finish("channel_mean", x.data.mean(axis=(0, 1)), (x,), grad_fn)


def broadcast_planes(u: Tensor, h: int, w: int) -> Tensor:
    """Vector (P,) -> H x W x P with plane p constant u[p]."""
    if u.data.ndim != 1:
        raise ValueError(f"broadcast_planes expects a vector, got {u.data.shape}")
    out = np.broadcast_to(u.data, (h, w, u.data.shape[0])).copy()

    def grad_fn(g):
        return (g.sum(axis=(0, 1)),)

    return _finish("broadcast_planes", out, (u,), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _finish("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), grad_fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        return (g * (2.0 / n) * diff, None)

    return _finish("mse", np.asarray((diff * diff).mean(), dtype=diff.dtype), (pred, target), grad_fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise RuntimeError("loss is not on a tape")
    if tape.cleared:
        raise RuntimeError("backward on cleared tape")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    pending = {loss.node: seed}
    for idx in range(loss.node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if idx != loss.node:
            node.out.grad = g
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if inp.tape is tape and inp.node is not None:
                prev = pending.get(inp.node)
                pending[inp.node] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
