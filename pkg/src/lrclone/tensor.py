# src/lrclone/tensor.py
"""
Dense row-major tensors with tape-based reverse-mode differentiation.

Ops record onto the innermost active `Tape` only when one of their inputs
requires a gradient; outside a tape everything runs as plain numpy. The tape
is append-only, so its op list is already in topological order and backward
is a single reverse sweep that visits every recorded op once.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes, a
trailing-suffix operand (row-vector gains) or a keepdims reduction shape;
matmul broadcasts batch dimensions (grouped-query attention). Anything else
needs an explicit reshape.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ContractError, ShapeError

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

_state = threading.local()


def _tape_stack() -> list[Tape | None]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for finite-difference probes inside a step."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@dataclass(slots=True)
class TapeOp:
    name: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


class Tape:
    """Recording graph for one training step. Not reusable across steps."""

    def __init__(self) -> None:
        self.ops: list[TapeOp] = []
        self.leaves: dict[int, Tensor] = {}
        self._ids = itertools.count()

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def node_of(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t._tape is self and t.node_id is not None:
            return t.node_id
        # First sighting of a gradient-bearing tensor on this tape: a leaf.
        nid = next(self._ids)
        t.node_id = nid
        t._tape = self
        self.leaves[nid] = t
        return nid

    def record(self, name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        out = Tensor(data, requires_grad=True)
        ids = tuple(self.node_of(t) for t in inputs)
        out.node_id = next(self._ids)
        out._tape = self
        self.ops.append(TapeOp(name, ids, out.node_id, backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """
        Reverse sweep from a scalar loss.

        Accumulates into `.grad` of every leaf reached and returns
        {id(leaf): grad}. Leaves the loss does not depend on are absent.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            return {}

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(op.output, None)
            if g is None:
                continue
            for nid, gi in zip(op.inputs, op.backward(g), strict=True):
                if nid is None or gi is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = gi if prev is None else prev + gi

        reached: dict[int, np.ndarray] = {}
        for nid, leaf in self.leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            reached[id(leaf)] = leaf.grad
        return reached


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    tape = loss._tape
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        return {}
    return tape.backward(loss)


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    return tape.record(name, data, inputs, backward_fn)


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are incompatible") from None
    if out == a:
        small = b
    elif out == b:
        small = a
    else:
        raise ShapeError(f"{op}: shapes {a} and {b} would both expand; reshape explicitly")
    if len(small) == 0:
        return
    if len(small) < len(out) and tuple(out[-len(small) :]) == small:
        return
    if len(small) == len(out) and all(s in (1, o) for s, o in zip(small, out, strict=True)):
        return
    raise ShapeError(f"{op}: broadcast of {small} against {out} is not a row-vector or keepdims pattern")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: int | tuple[int, ...] | None, keepdims: bool):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape).copy()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def _lift(self, other: Any) -> Tensor:
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # elementwise

    def __add__(self, other: Any) -> Tensor:
        b = self._lift(other)
        _check_broadcast(self.shape, b.shape, "add")
        sa, sb = self.shape, b.shape
        return _make("add", self.data + b.data, (self, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        b = self._lift(other)
        _check_broadcast(self.shape, b.shape, "sub")
        sa, sb = self.shape, b.shape
        return _make("sub", self.data - b.data, (self, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other: Any) -> Tensor:
        return self._lift(other) - self

    def __mul__(self, other: Any) -> Tensor:
        b = self._lift(other)
        _check_broadcast(self.shape, b.shape, "mul")
        a_data, b_data = self.data, b.data
        return _make(
            "mul",
            a_data * b_data,
            (self, b),
            lambda g: (_unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        b = self._lift(other)
        _check_broadcast(self.shape, b.shape, "div")
        a_data, b_data = self.data, b.data
        return _make(
            "div",
            a_data / b_data,
            (self, b),
            lambda g: (
                _unbroadcast(g / b_data, a_data.shape),
                _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape),
            ),
        )

    def __neg__(self) -> Tensor:
        return _make("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        if not isinstance(exponent, int | float):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _make("pow", x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _make("exp", out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        x = self.data
        return _make("log", np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self) -> Tensor:
        s = _sigmoid(self.data)
        return _make("sigmoid", s, (self,), lambda g: (g * s * (1.0 - s),))

    def silu(self) -> Tensor:
        x = self.data
        s = _sigmoid(x)
        return _make("silu", x * s, (self,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))

    # reductions

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        return _make("sum", out, (self,), lambda g: (_expand_reduced(g, shape, axis, keepdims),))

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # layout

    def reshape(self, *shape: int | tuple[int, ...]) -> Tensor:
        new_shape = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape
        old = self.shape
        try:
            out = self.data.reshape(new_shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {old} into {new_shape}") from None
        return _make("reshape", out, (self,), lambda g: (g.reshape(old),))

    def permute(self, *axes: int) -> Tensor:
        inverse = tuple(int(i) for i in np.argsort(axes))
        return _make("permute", self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> Tensor:
        if self.ndim != 2:
            raise ShapeError(f".T is for matrices, got shape {self.shape}")
        return self.permute(1, 0)

    @property
    def mT(self) -> Tensor:
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.permute(*axes)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    # normalizers

    def softmax(self, axis: int = -1) -> Tensor:
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        return _make("softmax", y, (self,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, axis: int = -1) -> Tensor:
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        p = np.exp(out)
        return _make("log_softmax", out, (self,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))

    def masked_fill(self, mask: np.ndarray, value: float) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        out = np.where(mask, np.asarray(value, dtype=self.dtype), self.data)
        return _make("masked_fill", out, (self,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))

    def take_last(self, ids: np.ndarray) -> Tensor:
        """Pick one entry per row of the last axis: out[...] = self[..., ids[...]]."""
        idx = np.asarray(ids, dtype=np.int64)[..., None]
        if idx.shape[:-1] != self.shape[:-1]:
            raise ShapeError(f"take_last: index shape {idx.shape[:-1]} vs tensor {self.shape}")
        shape = self.shape
        out = np.take_along_axis(self.data, idx, axis=-1)[..., 0]

        def _back(g: np.ndarray) -> tuple[np.ndarray]:
            gx = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(gx, idx, g[..., None], axis=-1)
            return (gx,)

        return _make("take_last", out, (self,), _back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.

    Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC, summed back over broadcast batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    a_data, b_data = a.data, b.data

    def _back(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if b_data.ndim == 2:
            k, n = b_data.shape
            ga = g @ b_data.T
            gb = a_data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b_data.shape)
        return ga, gb

    return _make("matmul", out, (a, b), _back)


def silu(x: Tensor) -> Tensor:
    return x.silu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; backward scatter-adds in index order."""
    idx = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weight.shape}")
    shape = weight.shape
    out = weight.data[idx]

    def _back(g: np.ndarray) -> tuple[np.ndarray]:
        gw = np.zeros(shape, dtype=g.dtype)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _make("embedding", out, (weight,), _back)


def rms_normalize(x: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x², -1) + eps). An all-zero row with eps = 0 maps to zeros."""
    xd = x.data
    d = xd.shape[-1]
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        r = np.where(ms + eps > 0, 1.0 / np.sqrt(ms + eps), 0.0).astype(xd.dtype)
    out = xd * r

    def _back(g: np.ndarray) -> tuple[np.ndarray]:
        gx = (g * xd).sum(axis=-1, keepdims=True)
        return (g * r - xd * (r**3) * gx / d,)

    return _make("rms_normalize", out, (x,), _back)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate((-x[..., half:], x[..., :half]), axis=-1)


def _rotate_half_t(y: np.ndarray) -> np.ndarray:
    half = y.shape[-1] // 2
    return np.concatenate((y[..., half:], -y[..., :half]), axis=-1)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate pairs (i, i + hd/2) of the last axis; cos/sin broadcast as (..., seq, hd)."""
    if x.shape[-1] % 2:
        raise ShapeError(f"rotary needs an even last dimension, got {x.shape}")
    xd = x.data
    out = xd * cos + _rotate_half(xd) * sin
    return _make("rotary", out, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


def sum_scalars(values: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors in list order (fixed reduction order)."""
    if not values:
        raise ContractError("sum_scalars needs at least one tensor")
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total
