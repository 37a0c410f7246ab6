"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Everything the model computes is a matrix: documents are rows of count
matrices, posteriors are rows of mean / log-variance matrices, scalars are
1x1.  Lower-rank inputs are promoted to row vectors on construction, which
keeps every op a plain matrix op and avoids rank bookkeeping.

Gradients are recorded on an explicit :class:`Tape`.  Ops executed while a
tape is active append one record each; :func:`backward` replays the records
in exact reverse execution order, so a fresh tape per minibatch gives
define-by-run semantics with variable shapes (documents have different
sentence counts).  Tapes are tracked per-thread: concurrent evaluation
passes on shared read-only parameters never see each other's tape.

Every op validates that its output is finite.  NaN or Inf anywhere is a
:class:`~nahtm.errors.NumericError`, never a silently propagated value.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "affine",
    "backward",
    "clip",
    "exp",
    "log",
    "log_softmax_rows",
    "matmul",
    "mul",
    "rows",
    "scale",
    "softmax_rows",
    "softplus",
    "sparsemax_rows",
    "sub",
    "tanh",
    "transpose",
    "tsum",
    "vstack",
]

_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape currently recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops and their backward closures.

    Use as a context manager around the forward pass::

        with Tape():
            loss = ...  # ops record themselves
        backward(loss)

    Ops run outside any tape (evaluation, finite differences) record
    nothing and cost nothing extra.
    """

    def __init__(self) -> None:
        # each record: (output tensor, ((input, vjp), ...)) in execution order
        self._records: list[
            tuple["Tensor", tuple[tuple["Tensor", Callable[[np.ndarray], np.ndarray]], ...]]
        ] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()


class Tensor:
    """A 2-D float64 array plus a gradient accumulator.

    ``grad`` is lazily allocated as zeros, so the gradient of a tensor that
    never participated in a backward pass reads as exactly zero.  Repeated
    :func:`backward` calls without :meth:`zero_grad` accumulate.
    """

    __slots__ = ("data", "requires_grad", "tape", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, arr.shape[0])
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got array of rank {arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        """A copy that shares no history: constant with respect to any tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # A handful of dunders so model code reads as algebra.  Scalars only
    # where the intent is unambiguous; everything else goes through the
    # named ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _result(data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
    """Build an op output, enforcing the all-finite invariant."""
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"{op}: internal result of rank {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    out.data = arr
    out.requires_grad = requires_grad
    out.tape = None
    out._grad = None
    return out


def _record(out: Tensor, pairs) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out.tape = tape
        tape._records.append((out, tuple(pairs)))
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    """Equal shapes, or one operand is a single row with matching columns."""
    if a.shape == b.shape:
        return
    if a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(shape: tuple[int, int], g: np.ndarray) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad, "add")
    return _record(
        out,
        (
            (a, lambda g, s=a.shape: _reduce_to(s, g)),
            (b, lambda g, s=b.shape: _reduce_to(s, g)),
        ),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = _result(a.data - b.data, a.requires_grad or b.requires_grad, "sub")
    return _record(
        out,
        (
            (a, lambda g, s=a.shape: _reduce_to(s, g)),
            (b, lambda g, s=b.shape: _reduce_to(s, -g)),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a single broadcast row."""
    _broadcast_shape(a, b, "mul")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad, "mul")
    return _record(
        out,
        (
            (a, lambda g, o=b.data, s=a.shape: _reduce_to(s, g * o)),
            (b, lambda g, o=a.data, s=b.shape: _reduce_to(s, g * o)),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    if not math.isfinite(c):
        raise NumericError("scale: coefficient must be finite")
    out = _result(a.data * c, a.requires_grad, "scale")
    return _record(out, ((a, lambda g, c=c: g * c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad, "matmul")
    return _record(
        out,
        (
            (a, lambda g, o=b.data: g @ o.T),
            (b, lambda g, o=a.data: o.T @ g),
        ),
    )


def transpose(a: Tensor) -> Tensor:
    out = _result(a.data.T, a.requires_grad, "transpose")
    return _record(out, ((a, lambda g: g.T),))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` a single row broadcast over rows of ``x``."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[1]} does not match weight rows {w.shape[0]}")
    if b.shape != (1, w.shape[1]):
        raise ShapeError(f"affine: bias shape {b.shape} must be (1, {w.shape[1]})")
    out = _result(
        x.data @ w.data + b.data,
        x.requires_grad or w.requires_grad or b.requires_grad,
        "affine",
    )
    return _record(
        out,
        (
            (x, lambda g, o=w.data: g @ o.T),
            (w, lambda g, o=x.data: o.T @ g),
            (b, lambda g: g.sum(axis=0, keepdims=True)),
        ),
    )


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    out = _result(data, x.requires_grad, "tanh")
    return _record(out, ((x, lambda g, o=data: g * (1.0 - o * o)),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes NumericError below
        data = np.exp(x.data)
    out = _result(data, x.requires_grad, "exp")
    return _record(out, ((x, lambda g, o=data: g * o),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = _result(np.log(x.data), x.requires_grad, "log")
    return _record(out, ((x, lambda g, o=x.data: g / o),))


def softplus(x: Tensor) -> Tensor:
    data = np.logaddexp(0.0, x.data)
    out = _result(data, x.requires_grad, "softplus")
    # derivative is the logistic sigmoid, computed overflow-free
    return _record(out, ((x, lambda g, o=x.data: g * (0.5 * (1.0 + np.tanh(0.5 * o)))),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the interval."""
    if not (lo < hi):
        raise ShapeError(f"clip: empty interval [{lo}, {hi}]")
    data = np.clip(x.data, lo, hi)
    out = _result(data, x.requires_grad, "clip")
    mask = (x.data >= lo) & (x.data <= hi)
    return _record(out, ((x, lambda g, m=mask: g * m),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stable under large inputs via max subtraction."""
    if x.shape[1] == 0:
        raise ShapeError("softmax_rows: rows must have at least one column")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _result(p, x.requires_grad, "softmax_rows")

    def _bw(g: np.ndarray, p=p) -> np.ndarray:
        return p * (g - (g * p).sum(axis=1, keepdims=True))

    return _record(out, ((x, _bw),))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.shape[1] == 0:
        raise ShapeError("log_softmax_rows: rows must have at least one column")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    data = z - lse
    out = _result(data, x.requires_grad, "log_softmax_rows")

    def _bw(g: np.ndarray, p=np.exp(data)) -> np.ndarray:
        return g - p * g.sum(axis=1, keepdims=True)

    return _record(out, ((x, _bw),))


def sparsemax_rows(x: Tensor) -> Tensor:
    """Row-wise Euclidean projection onto the probability simplex.

    Forward: sort each row descending, find the largest k with
    ``sorted[k-1] * k > cumsum(sorted)[k-1] - 1``, set
    ``tau = (cumsum over those k - 1) / k`` and clip ``row - tau`` at zero.
    Backward applies the exact Jacobian: with support S of the output,
    ``J = diag(1_S) - 1_S 1_S^T / |S|``.
    """
    r, k = x.shape
    if k == 0:
        raise ShapeError("sparsemax_rows: rows must have at least one column")
    z = x.data
    zs = np.sort(z, axis=1)[:, ::-1]
    cum = np.cumsum(zs, axis=1) - 1.0
    ranks = np.arange(1, k + 1, dtype=np.float64)
    valid = zs * ranks > cum
    sizes = valid.sum(axis=1)  # at least 1: the top element always qualifies
    tau = cum[np.arange(r), sizes - 1] / sizes
    p = np.maximum(z - tau[:, None], 0.0)
    out = _result(p, x.requires_grad, "sparsemax_rows")

    def _bw(g: np.ndarray, mask=p > 0.0) -> np.ndarray:
        cnt = mask.sum(axis=1, keepdims=True)
        mean = (g * mask).sum(axis=1, keepdims=True) / cnt
        return np.where(mask, g - mean, 0.0)

    return _record(out, ((x, _bw),))


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all entries (1x1), columns (axis=0 -> 1xC) or rows (axis=1 -> Rx1)."""
    if axis is None:
        data = x.data.sum().reshape(1, 1)
    elif axis == 0:
        data = x.data.sum(axis=0, keepdims=True)
    elif axis == 1:
        data = x.data.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"tsum: axis must be None, 0 or 1, got {axis}")
    out = _result(data, x.requires_grad, "tsum")
    return _record(out, ((x, lambda g, s=x.shape: np.broadcast_to(g, s)),))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]`` as its own tensor."""
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"rows: slice [{start}, {stop}) out of range for {x.shape[0]} rows")
    out = _result(x.data[start:stop], x.requires_grad, "rows")

    def _bw(g: np.ndarray, s=x.shape, a=start, b=stop) -> np.ndarray:
        full = np.zeros(s)
        full[a:b] = g
        return full

    return _record(out, ((x, _bw),))


def vstack(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("vstack: need at least one tensor")
    cols = parts[0].shape[1]
    for t in parts:
        if t.shape[1] != cols:
            raise ShapeError(f"vstack: column counts differ, {t.shape[1]} vs {cols}")
    data = np.concatenate([t.data for t in parts], axis=0)
    out = _result(data, any(t.requires_grad for t in parts), "vstack")
    pairs = []
    offset = 0
    for t in parts:
        n = t.shape[0]
        pairs.append((t, lambda g, a=offset, b=offset + n: g[a:b]))
        offset += n
    return _record(out, pairs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every participant.

    Replays the loss tensor's tape in exact reverse execution order.  Each
    call computes a full, fresh gradient and adds it to the accumulators,
    so two calls without ``zero_grad`` leave doubled gradients.  Tensors
    that did not contribute to the loss are untouched (their grads stay
    zero).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("backward: loss was not recorded on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, pairs in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue  # op not on any path to the loss
        for inp, vjp in pairs:
            if not inp.requires_grad:
                continue
            contrib = vjp(g)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.array(contrib, dtype=np.float64, copy=True)
                holders[key] = inp
    for key, t in holders.items():
        t._grad = t.grad + grads[key]
