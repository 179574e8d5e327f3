"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) when any input requires a gradient.  Outside a tape, the same
functions run as plain numpy with no bookkeeping, which is what evaluation uses.

Storage is a C-contiguous float64 numpy array, i.e. row-major flat data plus a
shape.  Slicing copies.  Every op checks its output for NaN/Inf and raises
:class:`NumericError` instead of letting non-finite values propagate.
"""
from __future__ import annotations

import base64
import contextvars
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    ops: list[_Op] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name, inputs, output, backward) -> None:
        self.ops.append(_Op(name, tuple(inputs), output, backward))

    def produced(self, t: Tensor) -> bool:
        return any(op.output is t for op in self.ops)


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("icl_lab_tape", default=None)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _finish(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by {name}")
    needs_grad = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE.get()
    result = Tensor._wrap(out, needs_grad and tape is not None)
    if result.requires_grad:
        tape.record(name, inputs, result, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = x2 * (_GELU_C * _GELU_A)
    t += _GELU_C
    t *= xd
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        dt = x2 * (3.0 * _GELU_A * _GELU_C)
        dt += _GELU_C
        dt *= 1.0 - t * t
        dt *= xd
        dt += 1.0 + t
        dt *= 0.5
        dt *= g
        return (dt,)

    return _finish("gelu", out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if bd.ndim == 2:
        # (..., m, k) @ (k, n): fold leading axes into one GEMM
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2 if need_b else None
            return ga, gb

        return _finish("matmul", out, (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(x.data, axes).copy(), (x,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _finish("reshape", out.copy(), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Copy of ``x[..., start:stop, ...]`` along ``axis``."""
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _finish("slice", x.data[idx].copy(), (x,), backward)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _finish("sum", np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _finish("sum", x.data.sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """exp((x - max) / temperature), normalised along ``axis``."""
    if not temperature > 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax received non-finite input")
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return _finish("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _finish("mse_loss", np.asarray((diff * diff).sum() / n), (pred, target),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not tape.produced(loss):
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        op.output.grad = g
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
    for key, g in grads.items():
        touched[key].grad = g


# ---------------------------------------------------------------------------
# serialization: uint32 ndim, uint32 shape[ndim], float64 data; all little-endian


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    offset = 4 + 4 * ndim
    n = int(np.prod(shape)) if shape else 1
    if len(buf) != offset + 8 * n:
        raise ContractError(f"tensor buffer length {len(buf)} does not match shape {shape}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape)
    return Tensor(data)


def tensor_to_b64(t: Tensor | np.ndarray) -> str:
    return base64.b64encode(tensor_to_bytes(t)).decode("ascii")


def tensor_from_b64(s: str) -> Tensor:
    return tensor_from_bytes(base64.b64decode(s))
