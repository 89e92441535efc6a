"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is implicit: every op output remembers its parents and a closure
that pushes gradients backward. Node ids increase with insertion order, so
reverse-id order is a valid reverse-topological order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class Tensor:
    """A dense array of float64 values, optionally tracked for autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.op = ""
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Stop-gradient view sharing the same storage (no graph edges)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._backward = None
        out._parents = ()
        out.op = ""
        out._id = next(_ids)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor]) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(tracked))
    out.op = op
    if tracked:
        out._parents = tuple(parents)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate grads of every tracked tensor reachable from a scalar loss."""
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # Reachable set via iterative DFS; parents always have smaller ids than
    # children, so descending id is a reverse-topological visit order.
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    loss.grad = np.array(1.0)
    for t in sorted(seen.values(), key=lambda n: n._id, reverse=True):
        if t._backward is not None and t.grad is not None:
            t._backward()


def op_trace(out: Tensor) -> list[str]:
    """Ordered op names of every graph node that produced `out` (leaves excluded)."""
    seen: dict[int, Tensor] = {}
    stack = [out]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [t.op for t in sorted(seen.values(), key=lambda n: n._id) if t.op]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Allowed: equal shapes, a trailing vector broadcast over rows, or a scalar.
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)  # trailing vector broadcast over rows


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = _make(a.data + b.data, "add", (a, b))

    def _bw():
        g = out.grad
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = _make(a.data - b.data, "sub", (a, b))

    def _bw():
        g = out.grad
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = _make(a.data * b.data, "mul", (a, b))

    def _bw():
        g = out.grad
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), "relu", (a,))

    def _bw():
        # masks where the input was <= 0
        _accumulate(a, out.grad * (a.data > 0.0))

    out._backward = _bw if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"log requires strictly positive inputs, min was {a.data.min()}")
    out = _make(np.log(a.data), "log", (a,))

    def _bw():
        _accumulate(a, out.grad / a.data)

    out._backward = _bw if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,))

    def _bw():
        _accumulate(a, out.grad * out.data)

    out._backward = _bw if out.requires_grad else None
    return out


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data * a.data, "square", (a,))

    def _bw():
        _accumulate(a, out.grad * 2.0 * a.data)

    out._backward = _bw if out.requires_grad else None
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "log": log,
                "exp": exp, "square": square}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch the named elementwise op (binary kinds require b)."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} is binary and needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{kind} is unary")
    return fn(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _make(a.data @ b.data, "matmul", (a, b))

    def _bw():
        g = out.grad
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out._backward = _bw if out.requires_grad else None
    return out


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.asarray(a.data.sum()), "sum", (a,))

    def _bw():
        _accumulate(a, np.broadcast_to(out.grad, a.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.asarray(a.data.mean()), "mean", (a,))

    def _bw():
        _accumulate(a, np.broadcast_to(out.grad / a.data.size, a.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax expects (batch, classes>=2) logits, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _make(p, "softmax", (logits,))

    def _bw():
        g = out.grad
        dot = (g * p).sum(axis=1, keepdims=True)
        _accumulate(logits, p * (g - dot))

    out._backward = _bw if out.requires_grad else None
    return out


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax; numerically safe even for saturated logits."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"log_softmax expects (batch, classes>=2) logits, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _make(shifted - lse, "log_softmax", (logits,))
    p = np.exp(out.data)

    def _bw():
        g = out.grad
        _accumulate(logits, g - p * g.sum(axis=1, keepdims=True))

    out._backward = _bw if out.requires_grad else None
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    out = _make(np.concatenate([a.data, b.data], axis=0), "concat_rows", (a, b))
    n = a.shape[0]

    def _bw():
        g = out.grad
        _accumulate(a, g[:n])
        _accumulate(b, g[n:])

    out._backward = _bw if out.requires_grad else None
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ValueError(f"slice_rows: bad range [{start}, {stop}) for shape {a.shape}")
    out = _make(a.data[start:stop].copy(), "slice_rows", (a,))

    def _bw():
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        _accumulate(a, g)

    out._backward = _bw if out.requires_grad else None
    return out


@dataclass
class BatchNormState:
    """Per-feature affine batch normalization state.

    gamma/beta are trainable; running stats are plain buffers updated by
    exponential moving average in training mode only.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, dim: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            eps=eps,
            momentum=momentum,
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize columns of x; batch statistics in training, running in eval."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"batch_norm expects a (batch, dim) input, got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm training mode needs batch >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased, matches the normalization below
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var
    denom = np.sqrt(var + state.eps)
    xhat = (x.data - mu) / denom
    gamma, beta = state.gamma, state.beta
    out = _make(gamma.data * xhat + beta.data, "batch_norm", (x, gamma, beta))
    n = x.shape[0]

    def _bw():
        g = out.grad
        _accumulate(beta, g.sum(axis=0))
        _accumulate(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                # gradient through the batch mean and variance
                dx = (dxhat - dxhat.mean(axis=0)
                      - xhat * (dxhat * xhat).sum(axis=0) / n) / denom
            else:
                dx = dxhat / denom
            _accumulate(x, dx)

    out._backward = _bw if out.requires_grad else None
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
