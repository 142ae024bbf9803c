"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations a conditioned U-Net needs are provided. Every op takes
and returns :class:`Tensor`; numpy arrays are the storage. Images are laid
out NCHW.

Precision defaults to float32. Wrap gradient checks in :func:`float64_mode`.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

_dtype_var: contextvars.ContextVar[type] = contextvars.ContextVar("dtype", default=np.float32)
_grad_var: contextvars.ContextVar[bool] = contextvars.ContextVar("grad", default=True)
_debug_var: contextvars.ContextVar[bool] = contextvars.ContextVar("debug", default=False)
# global so that execution order is total across every graph in the process
_seq = itertools.count()


def get_default_dtype():
    return _dtype_var.get()


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in float64 inside the block."""
    token = _dtype_var.set(np.float64)
    try:
        yield
    finally:
        _dtype_var.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    token = _grad_var.set(False)
    try:
        yield
    finally:
        _grad_var.reset(token)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every op output for NaN/Inf."""
    token = _debug_var.set(enabled)
    try:
        yield
    finally:
        _debug_var.reset(token)


class Tensor:
    """N-dimensional float array that can take part in the gradient tape.

    ``grad`` is allocated (zeros) exactly when ``requires_grad`` is set and
    always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.requires_grad = False
        self.grad = None
        if requires_grad:
            self.requires_grad_()

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out._parents = ()
        out._backward = None
        out._seq = next(_seq)
        out.requires_grad = requires_grad
        out.grad = np.zeros_like(data) if requires_grad else None
        return out

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        self.grad = np.zeros_like(self.data) if flag else None
        return self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, -_as_tensor(other, self.dtype))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


@dataclass(frozen=True)
class Parameter:
    """A trainable tensor under its dotted module path."""

    name: str
    tensor: Tensor


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=dtype or get_default_dtype()), False)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug_var.get() and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values produced by forward op")
    track = _grad_var.get() and any(p.requires_grad for p in parents)
    out = Tensor._result(data, track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Nodes are replayed in exact reverse execution order. The recorded graph
    is released afterwards, so a second call needs a fresh forward pass.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}", dim="loss")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    loss.grad += 1.0
    for t in order:
        if t._backward is None:
            continue
        grads = t._backward(t.grad)
        for p, g in zip(t._parents, grads):
            if g is not None and p.requires_grad:
                p.grad += _unbroadcast(g, p.shape)
    for t in order:
        if t._backward is not None:
            t._parents = ()
            t._backward = None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _record(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0; NaN passes through so the guard sees it
    pos = x.data > 0
    return _record(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------- dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, N) and weight (M, N)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear expects x (B, N) and weight (M, N)", dim="rank")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear input width {x.shape[1]} != weight input width {weight.shape[1]}", dim="N"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="M")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, grad_fn)


# ------------------------------------------------------------------- conv/pool


def _im2col(x: np.ndarray, k: int, pad: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (C*k*k, B*Ho*Wo) patch matrix."""
    batch, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((c, batch, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, batch, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout, square kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.ndim}", dim="rank")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}", dim="k")
    batch, cin, height, width = x.shape
    cout, wcin, k, _ = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d input has Cin={cin} but weight expects Cin={wcin}", dim="Cin")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)", dim="Cout")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"same padding needs an odd kernel, got k={k}", dim="k")
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValidationError(f"padding must be 'same' or 'valid', got {padding!r}")
    if height + 2 * pad < k or width + 2 * pad < k:
        raise ShapeError("conv2d kernel larger than padded input", dim="H")

    cols = _im2col(x.data, k, pad, stride)
    ho = (height + 2 * pad - k) // stride + 1
    wo = (width + 2 * pad - k) // stride + 1
    wmat = weight.data.reshape(cout, cin * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, batch, ho, wo).transpose(1, 0, 2, 3))

    def grad_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad and stride == 1:
            # full correlation of the upstream grad with the flipped kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = flipped @ _im2col(g, k, k - 1 - pad, 1)
            gx = gx.reshape(cin, batch, height, width).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, k, k, batch, ho, wo)
            gxp = np.zeros((cin, batch, height + 2 * pad, width + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, pad:pad + height, pad:pad + width].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B, C, H, W), got {x.shape}", dim="rank")
    area = x.shape[2] * x.shape[3]
    return _record(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),),
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; the gradient goes to the first argmax."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects (B, C, H, W), got {x.shape}", dim="rank")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}", dim="H" if h % 2 else "W")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return _record(out, (x,), grad_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects (B, C, H, W), got {x.shape}", dim="rank")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)
    return _record(
        out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)
    )


# ------------------------------------------------------------ channel plumbing


def _concat(a: Tensor, b: Tensor, rank: int, what: str) -> Tensor:
    if a.ndim != rank or b.ndim != rank:
        raise ShapeError(f"{what} expects rank-{rank} operands", dim="rank")
    for axis in range(rank):
        if axis != 1 and a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"{what}: dimension {axis} differs ({a.shape[axis]} vs {b.shape[axis]})", dim=str(axis)
            )
    split = a.shape[1]
    return _record(
        np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s."""
    return _concat(a, b, 4, "concat_channels")


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    return _concat(a, b, 2, "concat_vec")


def slice_vec(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a (B, N) tensor."""
    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), (x,), grad_fn)


def _check_gate(x: Tensor, v: Tensor, what: str) -> None:
    if x.ndim != 4 or v.ndim != 2:
        raise ShapeError(f"{what} expects x (B, C, H, W) and a (B, C) vector", dim="rank")
    if v.shape[1] != x.shape[1]:
        raise ShapeError(f"{what}: x has C={x.shape[1]} but vector has {v.shape[1]}", dim="C")
    if v.shape[0] != x.shape[0]:
        raise ShapeError(f"{what}: batch {x.shape[0]} vs {v.shape[0]}", dim="B")


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """out[b, c, h, w] = x[b, c, h, w] * gate[b, c]"""
    _check_gate(x, gate, "channel_scale")
    gd = gate.data[:, :, None, None]
    return _record(
        x.data * gd, (x, gate), lambda g: (g * gd, (g * x.data).sum(axis=(2, 3)))
    )


def channel_shift(x: Tensor, shift: Tensor) -> Tensor:
    """out[b, c, h, w] = x[b, c, h, w] + shift[b, c]"""
    _check_gate(x, shift, "channel_shift")
    return _record(
        x.data + shift.data[:, :, None, None], (x, shift), lambda g: (g, g.sum(axis=(2, 3)))
    )


# ------------------------------------------------------------------------ loss


def bce_with_logits(pred: Tensor, target, class_weights: tuple[float, float] | None = None) -> Tensor:
    """Mean binary cross-entropy on logits.

    ``class_weights`` is ``(negative_weight, positive_weight)`` applied per
    element according to the target.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}", dim="shape")
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("bce_with_logits targets must be 0 or 1")
    t = t.astype(pred.dtype, copy=False)
    z = pred.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    if class_weights is not None:
        w_neg, w_pos = class_weights
        w = np.where(t > 0, w_pos, w_neg).astype(pred.dtype)
    else:
        w = None
    loss = (per * w).mean() if w is not None else per.mean()

    def grad_fn(g):
        d = (_stable_sigmoid(z) - t) * (g / n)
        return (d * w if w is not None else d,)

    return _record(np.asarray(loss, dtype=pred.dtype), (pred,), grad_fn)


# -------------------------------------------------------------- gradient check


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` is called with ``x`` itself, so ``x`` may be an input or a
    parameter that ``f`` closes over; its data is perturbed in place and
    restored. Error per coordinate is ``|a - n| / max(1, |a|)``.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    had_grad = x.requires_grad
    old_grad = None if x.grad is None else x.grad.copy()
    x.requires_grad_(True)
    loss = f(x)
    if loss.data.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function", dim="loss")
    backward(loss)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(x).data)
            flat[i] = orig - eps
            down = float(f(x).data)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)

    if had_grad:
        x.grad = old_grad
    else:
        x.requires_grad_(False)
    a = analytic.reshape(-1).astype(np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
