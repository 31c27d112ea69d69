"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: while a Tape is active, every operation appends a record
(inputs, output, backward rule) to it. ``Tape.backward(loss)`` walks the
records in reverse and accumulates adjoints into every tensor that
requires gradients. The tape is rebuilt on every forward pass; nothing
is cached between passes.

Subgradient conventions: ``abs``, ``relu`` and ``maximum`` propagate a
zero gradient at their kink. Every forward op checks its output for
NaN/Inf and raises DomainError instead of letting non-finite values
flow, so overflow is an error rather than a silent poison.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "absolute",
    "relu",
    "softplus",
    "sqrt",
    "maximum",
    "softmax",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "swap_last_axes",
    "concat",
    "slice_axis",
    "repeat_axis",
    "row_add",
    "row_mul",
    "group_norm",
    "logsumexp",
    "finite_diff_check",
    "FiniteDiffReport",
]

_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus gradient metadata.

    ``data`` is treated as immutable once the tensor has been used in a
    forward op. ``adjoint`` holds d(loss)/d(self) after a backward pass
    and is None for tensors that do not require gradients.
    """

    __slots__ = ("data", "requires_grad", "adjoint")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.adjoint: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of the same values; never recorded on a tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of forward operations for one backward pass.

    Use as a context manager around the forward computation, then call
    ``backward`` on the scalar loss. A tape is confined to the thread
    that built it.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.adjoint`` for every tensor on the tape.

        ``loss`` must be a scalar recorded on this tape (or a leaf).
        Tensors recorded here but unreachable from the loss end with a
        zero adjoint. ``params``, when given, are guaranteed an adjoint
        buffer (zeros if they never appeared on the tape).
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad:
                    seen[id(t)] = t
            if rec.output.requires_grad:
                seen[id(rec.output)] = rec.output
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.array(ig, dtype=np.float64, copy=True)
                else:
                    acc += ig
        for tid, t in seen.items():
            g = grads.get(tid)
            t.adjoint = g if g is not None else np.zeros_like(t.data)
        if loss.requires_grad:
            loss.adjoint = np.ones((), dtype=np.float64)
        if params is not None:
            for p in params:
                if id(p) not in seen:
                    p.adjoint = np.zeros_like(p.data)


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, validate finiteness, and record it if a tape is active."""
    if not np.all(np.isfinite(out_data)):
        raise DomainError("operation produced non-finite values (overflow or invalid domain)")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.adjoint = None
    if needs:
        tape.records.append(_Record(inputs, out, backward))
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} must match (or one be scalar)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a gradient back to a scalar operand's shape
    if shape == ():
        return np.sum(g)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains exact zeros")
    out = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    t = _make(out, (a,), lambda g: (g * out,))
    return t


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        x = a.data
        sig = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * sig,)

    return _make(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0.0):
            raise DomainError("sqrt: gradient undefined at zero")
        return (g * 0.5 / out,)

    return _make(out, (a,), backward)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant floor; gradient passes iff a > floor."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = np.sum(gb, axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return _make(out, (a, b), backward)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over all elements or the given axis/axes."""
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes if axis is not None else None, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims:
            expand = list(a.shape)
            for ax in axes:
                expand[ax] = 1
            gg = gg.reshape(expand)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (np.asarray(g).reshape(a.shape),))


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last_axes: need at least 2 dims, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    ax = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: range [{start}, {stop}) out of bounds for axis {axis} of {a.shape}")
    slicer = [slice(None)] * a.ndim
    slicer[ax] = slice(start, stop)
    out = a.data[tuple(slicer)].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[tuple(slicer)] = g
        return (full,)

    return _make(out, (a,), backward)


def repeat_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a size-1 axis n times; backward sums over the axis."""
    ax = axis % a.ndim
    if a.shape[ax] != 1:
        raise ShapeError(f"repeat_axis: axis {axis} of {a.shape} must have size 1")
    out = np.repeat(a.data, n, axis=ax)
    return _make(out, (a,), lambda g: (np.sum(g, axis=ax, keepdims=True),))


def row_add(x: Tensor, v: Tensor) -> Tensor:
    """(..., D) + (D,): bias addition along the last axis."""
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"row_add: cannot add vector {v.shape} to rows of {x.shape}")

    def backward(g):
        gv = np.sum(g, axis=tuple(range(g.ndim - 1))) if g.ndim > 1 else g
        return g, gv

    return _make(x.data + v.data, (x, v), backward)


def row_mul(x: Tensor, v: Tensor) -> Tensor:
    """(..., D) * (D,): per-feature scaling along the last axis."""
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"row_mul: cannot scale rows of {x.shape} by vector {v.shape}")

    def backward(g):
        gx = g * v.data
        gv = np.sum(g * x.data, axis=tuple(range(g.ndim - 1))) if g.ndim > 1 else g * x.data
        return gx, gv

    return _make(x.data * v.data, (x, v), backward)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each contiguous group slice of the last axis to zero mean, unit variance.

    Layernorm restricted to per-group feature slices; the affine scale
    and shift live in the calling layer.
    """
    d = x.shape[-1]
    if d % groups != 0:
        raise ShapeError(f"group_norm: last dim {d} not divisible by {groups} groups")
    m = d // groups
    xs = x.data.reshape(x.shape[:-1] + (groups, m))
    mean = np.mean(xs, axis=-1, keepdims=True)
    centered = xs - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def backward(g):
        gs = g.reshape(x.shape[:-1] + (groups, m))
        gmean = np.mean(gs, axis=-1, keepdims=True)
        gydot = np.mean(gs * y, axis=-1, keepdims=True)
        dx = inv * (gs - gmean - y * gydot)
        return (dx.reshape(x.shape),)

    return _make(y.reshape(x.shape), (x,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis, composed from primitives.

    The row max is detached, so the gradient is exactly softmax(a).
    """
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = sub(a, Tensor(np.broadcast_to(m, a.shape).copy()))
    s = tsum(exp(shifted), axis=ax)
    return add(log(s), Tensor(np.squeeze(m, axis=ax)))


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    per_param: list[np.ndarray]

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"finite_diff_check: max rel err {self.max_rel_err:.3e} [{status}]"


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params``; their data
    buffers are perturbed in place between pure (untaped) forward
    evaluations. Relative error per coordinate is
    |ad - fd| / max(|ad|, |fd|, 1e-3).
    """
    with Tape() as tape:
        out = f()
    tape.backward(out, params=params)
    analytic = [p.adjoint.copy() for p in params]

    per_param = []
    worst = 0.0
    for p, ad in zip(params, analytic):
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-3)
        rel = np.abs(ad - fd) / denom
        per_param.append(rel)
        if rel.size:
            worst = max(worst, float(np.max(rel)))
    return FiniteDiffReport(max_rel_err=worst, passed=worst < tol, per_param=per_param)
