"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: every differentiable op allocates a fresh output
tensor and, when gradients are enabled, records the inputs together with a
backward rule as a ``TapeEntry`` on that output. ``backward`` walks the
recorded entries in reverse topological order and accumulates gradients into
``Tensor.grad``. The op set is exactly what an LSTM decoder with a softmax
cross-entropy loss needs; there is no broadcasting anywhere except the
explicit row-wise bias add.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not fit the requested operation."""


class GradientError(RuntimeError):
    """Backward-pass misuse, e.g. running backward twice on one graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that suspends tape recording (used for decoding)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 ndarray with an optional gradient and tape linkage.

    ``data`` is always a C-contiguous float64 array. ``grad`` stays ``None``
    until ``backward`` accumulates into it; it always matches ``data`` in
    shape. ``entry`` is the tape record of the op that produced this tensor,
    or ``None`` for leaves and constants.
    """

    __slots__ = ("data", "requires_grad", "grad", "entry", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.entry: TapeEntry | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.ndim != 0:
            raise ValueError(f"item: tensor has shape {self.shape}, expected a scalar")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class TapeEntry:
    """One recorded op: its input tensors, output tensor, and backward rule.

    The rule receives the gradient of the loss with respect to the output
    and accumulates gradients into the inputs.
    """

    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], None]


def parameter(data) -> Tensor:
    """A leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor], rule) -> Tensor:
    if _grad_enabled and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out.entry = TapeEntry(tuple(inputs), out, rule)
    return out


def tape_of(result: Tensor) -> list[TapeEntry]:
    """All tape entries reachable from ``result``, in topological order.

    Every entry appears after the entries that produced its inputs. The
    order is a deterministic function of graph construction order.
    """
    order: list[TapeEntry] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(result, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node.entry)  # type: ignore[arg-type]
            continue
        if node.entry is None or id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.entry.inputs:
            stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` for every reachable leaf.

    ``loss`` must be a scalar. A second call on the same graph raises
    ``GradientError``; rebuild the graph (and zero grads) to differentiate
    again. Calling backward on a scalar constant is a no-op.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError(
            "backward was already called on this graph; rebuild the graph to differentiate again"
        )
    loss._consumed = True
    if not loss.requires_grad:
        return
    entries = tape_of(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for entry in reversed(entries):
        g = entry.output.grad
        if g is None:
            continue
        entry.rule(g)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product [m,k] x [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), rule)


def add_bias(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an [r,n] matrix.

    This is the only sanctioned broadcast in the engine; the backward rule
    for the vector sums the incoming gradient over rows.
    """
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"add_bias: shape mismatch {m.shape} vs {v.shape}")
    out = Tensor(m.data + v.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(m, g)
        _accumulate(v, g.sum(axis=0))

    return _record(out, (m, v), rule)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), rule)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = Tensor(s)

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g * s * (1.0 - s))

    return _record(out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g * (1.0 - t * t))

    return _record(out, (x,), rule)


_ELEMENTWISE = {"add": (add, 2), "hadamard": (hadamard, 2), "sigmoid": (sigmoid, 1), "tanh": (tanh, 1)}


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch an elementwise op by name: add, hadamard, sigmoid, tanh."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"elementwise: unknown kind {kind!r}")
    fn, arity = _ELEMENTWISE[kind]
    if len(operands) != arity:
        raise ValueError(f"elementwise: {kind} takes {arity} operands, got {len(operands)}")
    return fn(*operands)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis; backward scatters into zeros."""
    n = x.shape[-1] if x.data.ndim else 0
    if x.data.ndim not in (1, 2) or not 0 <= start <= stop <= n:
        raise DimensionError(f"slice_last: bounds [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.data[..., start:stop].copy())

    def rule(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        buf[..., start:stop] = g
        _accumulate(x, buf)

    return _record(out, (x,), rule)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a [v,n] matrix by integer id; rows may repeat.

    Equivalent to one-hot selection, so the backward rule scatter-adds the
    gradient of each output row back into its source row.
    """
    if table.data.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take_rows: ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def rule(g: np.ndarray) -> None:
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf)

    return _record(out, (table,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape).copy())

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _record(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(x.data.sum())

    def rule(g: np.ndarray) -> None:
        _accumulate(x, np.full(x.shape, float(g)))

    return _record(out, (x,), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python float constant."""
    c = float(factor)
    out = Tensor(x.data * c)

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g * c)

    return _record(out, (x,), rule)


def softmax(z: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax along the last axis (plain ndarray helper)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Log of softmax along the last axis, computed with max subtraction."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-probability of ``target`` under softmax of 1-D logits.

    Backward rule is softmax(logits) minus the one-hot of the target.
    """
    if logits.data.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy: logits must be 1-D, got shape {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise ValueError("softmax_cross_entropy: logits must be finite")
    t = int(target)
    if not 0 <= t < logits.shape[0]:
        raise IndexError(f"softmax_cross_entropy: target {t} out of range for {logits.shape[0]} classes")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = Tensor(lse - shifted[t])

    def rule(g: np.ndarray) -> None:
        p = softmax(logits.data)
        p[t] -= 1.0
        _accumulate(logits, float(g) * p)

    return _record(out, (logits,), rule)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row softmax cross-entropy of [r,n] logits against r targets."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_rows: logits must be 2-D, got shape {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy_rows: expected {logits.shape[0]} targets, got shape {idx.shape}"
        )
    if not np.isfinite(logits.data).all():
        raise ValueError("cross_entropy_rows: logits must be finite")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise IndexError(f"cross_entropy_rows: target out of range for {logits.shape[1]} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(idx.size)
    out = Tensor(lse - shifted[rows, idx])

    def rule(g: np.ndarray) -> None:
        p = softmax(logits.data)
        p[rows, idx] -= 1.0
        _accumulate(logits, g[:, None] * p)

    return _record(out, (logits,), rule)


def gradient_check(f, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative disagreement between tape and finite-difference grads.

    ``f`` is called with ``inputs`` and must return a scalar tensor. The
    finite-difference side perturbs one coordinate at a time with central
    differences of step ``h``; the relative error of a coordinate is
    |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|) and the maximum over all
    coordinates of all inputs is returned.
    """
    if h <= 0:
        raise ValueError("gradient_check: h must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    loss = f(*inputs)
    if loss.data.ndim != 0:
        raise ValueError(f"gradient_check: f must return a scalar, got shape {loss.shape}")
    backward(loss)
    worst = 0.0
    with no_grad():
        for t in inputs:
            g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            flat_ad = g_ad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                f_plus = float(f(*inputs).data)
                flat[j] = orig - h
                f_minus = float(f(*inputs).data)
                flat[j] = orig
                g_fd = (f_plus - f_minus) / (2.0 * h)
                denom = max(1e-12, abs(flat_ad[j]) + abs(g_fd))
                worst = max(worst, abs(flat_ad[j] - g_fd) / denom)
    return worst
