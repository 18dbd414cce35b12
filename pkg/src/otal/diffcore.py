"""Minimal dense-tensor math with reverse-mode differentiation.

Tensors wrap 64-bit numpy arrays and record the ops applied to them; calling
:func:`backward` on a scalar result replays the recorded tape in reverse and
populates ``.grad`` on every reachable tensor that requires gradients.

Deliberately small: no GPU, no broadcasting beyond scalar-with-tensor, no
higher-order derivatives. Callers that feed ``log`` or divide must clamp
their inputs positive themselves (see ``EPS_LOG``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Floor used by loss code before log/div on probabilities that may saturate.
EPS_LOG = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """Dense float64 array participating in the gradient tape.

    ``values`` is row-major float64; ``grad`` is populated (same shape) after a
    backward pass from a scalar root when ``requires_grad`` is set.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple = (),
        _grad_fn: Callable | None = None,
        _op: str = "leaf",
    ) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached view of the values (no gradient tracking)."""
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor


class Tape:
    """Ordered record of the primitive ops reachable from a root tensor.

    Records are in topological order, so replaying them in reverse applies the
    chain rule one primitive at a time.
    """

    def __init__(self, records: list[OpRecord]) -> None:
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        records: list[OpRecord] = []
        visited: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._grad_fn is not None:
                    records.append(OpRecord(node._op, node._parents, node))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        return cls(records)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of a scalar root."""
    if root.values.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.trace(root)
    root.grad = np.ones_like(root.values)
    for rec in reversed(tape.records):
        out_grad = rec.output.grad
        if out_grad is None:
            continue
        for parent, parent_grad in zip(rec.inputs, rec.output._grad_fn(out_grad)):
            if not parent.requires_grad or parent_grad is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.values)
            parent.grad += parent_grad


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of a scalar operand."""
    if grad.shape == shape:
        return grad
    return np.full(shape, np.sum(grad))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(a.values + b.values, _parents=(a, b), _op="add")
    out._grad_fn = lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.values - b.values, _parents=(a, b), _op="sub")
    out._grad_fn = lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.values * b.values, _parents=(a, b), _op="mul")
    out._grad_fn = lambda g: (
        _reduce_to(g * b.values, a.shape),
        _reduce_to(g * a.values, b.shape),
    )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = Tensor(a.values / b.values, _parents=(a, b), _op="div")
    out._grad_fn = lambda g: (
        _reduce_to(g / b.values, a.shape),
        _reduce_to(-g * a.values / (b.values * b.values), b.shape),
    )
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values, _parents=(a,), _op="neg")
    out._grad_fn = lambda g: (-g,)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.values @ b.values, _parents=(a, b), _op="matmul")
    out._grad_fn = lambda g: (g @ b.values.T, a.values.T @ g)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.values), _parents=(a,), _op="exp")
    out._grad_fn = lambda g: (g * out.values,)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.values), _parents=(a,), _op="log")
    out._grad_fn = lambda g: (g / a.values,)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0), _parents=(a,), _op="relu")
    out._grad_fn = lambda g: (g * (a.values > 0.0),)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # clip keeps exp in range; sigmoid saturates to 0/1 long before +-500 anyway
    x = np.clip(a.values, -500.0, 500.0)
    out = Tensor(1.0 / (1.0 + np.exp(-x)), _parents=(a,), _op="sigmoid")
    out._grad_fn = lambda g: (g * out.values * (1.0 - out.values),)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.values), _parents=(a,), _op="softplus")
    x = np.clip(a.values, -500.0, 500.0)
    out._grad_fn = lambda g: (g / (1.0 + np.exp(-x)),)
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.values), _parents=(a,), _op="abs")
    out._grad_fn = lambda g: (g * np.sign(a.values),)
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    out = Tensor(np.clip(a.values, lo, hi), _parents=(a,), _op="clamp")
    # boundary counts as inside: identity gradient on the closed interval
    inside = (a.values >= lo) & (a.values <= hi)
    out._grad_fn = lambda g: (g * inside,)
    return out


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.values, axis=axis), _parents=(a,), _op="sum")
    if axis is None:
        out._grad_fn = lambda g: (np.broadcast_to(g, a.shape).copy(),)
    else:
        out._grad_fn = lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return out


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(np.mean(a.values, axis=axis), _parents=(a,), _op="mean")
    if axis is None:
        out._grad_fn = lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    else:
        out._grad_fn = lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)
    return out


def max_(a, axis: int | None = None) -> Tensor:
    """Max reduction; gradient routes to the first maximal entry."""
    a = as_tensor(a)
    out = Tensor(np.max(a.values, axis=axis), _parents=(a,), _op="max")

    if axis is None:
        idx = np.unravel_index(np.argmax(a.values), a.shape)

        def grad_fn(g):
            z = np.zeros_like(a.values)
            z[idx] = g.reshape(())
            return (z,)
    else:
        arg = np.expand_dims(np.argmax(a.values, axis=axis), axis)

        def grad_fn(g):
            z = np.zeros_like(a.values)
            np.put_along_axis(z, arg, np.expand_dims(g, axis), axis=axis)
            return (z,)

    out._grad_fn = grad_fn
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    ranks = {t.values.ndim for t in ts}
    if len(ranks) != 1:
        raise ShapeError("concat", *(t.shape for t in ts))
    out = Tensor(np.concatenate([t.values for t in ts], axis=axis), _parents=tuple(ts), _op="concat")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out._grad_fn = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def slice_(a, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof) with scatter backward."""
    a = as_tensor(a)
    out = Tensor(a.values[key], _parents=(a,), _op="slice")

    def grad_fn(g):
        z = np.zeros_like(a.values)
        z[key] = g
        return (z,)

    out._grad_fn = grad_fn
    return out


def gather(a, indices) -> Tensor:
    """Select rows along axis 0 by integer index; repeats accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.values[idx], _parents=(a,), _op="gather")

    def grad_fn(g):
        z = np.zeros_like(a.values)
        np.add.at(z, idx, g)
        return (z,)

    out._grad_fn = grad_fn
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.reshape(shape), _parents=(a,), _op="reshape")
    out._grad_fn = lambda g: (g.reshape(a.shape),)
    return out


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast (the only sanctioned alternative to implicit rules)."""
    a = as_tensor(a)
    try:
        v = np.broadcast_to(a.values, shape)
    except ValueError as err:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from err
    out = Tensor(v.copy(), _parents=(a,), _op="broadcast_to")

    def grad_fn(g):
        extra = g.ndim - a.values.ndim
        red = tuple(range(extra)) + tuple(
            i + extra for i, d in enumerate(a.shape) if d == 1 and g.shape[i + extra] != 1
        )
        return (np.sum(g, axis=red).reshape(a.shape),)

    out._grad_fn = grad_fn
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min as a composite; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    return sub(a, relu(sub(a, b)))


def maximum(a, b) -> Tensor:
    """Elementwise max as a composite; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    return add(a, relu(sub(b, a)))


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> float:
    """Compare the reverse-mode gradient of ``f`` at ``x`` to central differences.

    Returns the max over entries of ``|analytic - fd| / max(1, |analytic|)``.
    ``f`` must be deterministic and map a tensor to a scalar tensor.
    """
    if step <= 0:
        raise ValueError(f"finite_difference_check: step must be > 0, got {step}")
    probe = Tensor(x.values.copy(), requires_grad=True)
    out = f(probe)
    if out.values.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.values)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite analytic gradient")

    fd = np.zeros_like(analytic)
    flat_fd = fd.ravel()
    base = x.values.copy()
    for i in range(base.size):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            shifted = base.copy()
            shifted.flat[i] += sign * step
            val = f(Tensor(shifted)).item()
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite value at probe entry {i}")
            if slot == 0:
                hi = val
            else:
                flat_fd[i] = (hi - val) / (2.0 * step)
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(np.max(rel)) if rel.size else 0.0
