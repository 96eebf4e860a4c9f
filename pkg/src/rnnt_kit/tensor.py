"""Dense float tensors with reverse-mode automatic differentiation.

Every layer and loss in this package is composed from the ops defined here
(or from fused ops built with :func:`from_op`), so the single
finite-difference harness at the bottom of this module can validate
gradients for the entire stack.

Conventions:
  * float64 by default; float32 is kept if passed explicitly.
  * NaN/Inf are rejected whenever a Tensor is constructed, i.e. at every
    op boundary.  Log-domain code that needs -inf (the lattice dynamic
    program) operates on raw numpy arrays instead.
  * Broadcasting is limited to trailing axes: two shapes are compatible
    only if one equals the trailing suffix of the other.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "from_op",
    "concat",
    "flip",
    "pairwise_sum",
    "log_softmax",
    "softmax",
    "log_sum_exp",
    "dropout",
    "finite_difference_error",
    "make_rng",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with an op's contract."""


# Thread-local so utterances can be decoded in parallel without one
# thread's inference mode leaking into another.
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode) on this thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=tuple(range(grad.ndim - len(shape)))).reshape(shape)


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


class Tensor:
    """A dense array plus an optional backward edge into the graph.

    The value is immutable by convention once the tensor participates in a
    graph; the gradient harness is the only code that pokes ``.data`` in
    place (between forward rebuilds).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node, accumulating into ``.grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("implicit gradient is only defined for scalars")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        if not _broadcast_ok(self.shape, other.shape):
            raise ShapeError(f"cannot add shapes {self.shape} and {other.shape}")
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

        return from_op(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return from_op(-a.data, (a,), lambda g: _accum(a, -g))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        if not _broadcast_ok(self.shape, other.shape):
            raise ShapeError(f"cannot multiply shapes {self.shape} and {other.shape}")
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))

        return from_op(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
            raise ShapeError("matmul supports rank-1 and rank-2 operands only")
        if a.shape[-1] != (b.shape[0] if b.data.ndim >= 1 else None):
            raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")

        def bwd(g):
            ga, gb = _matmul_backward(a.data, b.data, g)
            _accum(a, ga)
            _accum(b, gb)

        return from_op(np.matmul(a.data, b.data), (a, b), bwd)

    # -- nonlinearities ----------------------------------------------------

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        return from_op(out_data, (a,), lambda g: _accum(a, g * (1.0 - out_data ** 2)))

    def sigmoid(self):
        a = self
        e = np.exp(-np.abs(a.data))
        out_data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return from_op(out_data, (a,), lambda g: _accum(a, g * out_data * (1.0 - out_data)))

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return from_op(out_data, (a,), lambda g: _accum(a, g * out_data))

    def log(self):
        a = self
        return from_op(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))

    # -- shape ops ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bwd(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).copy())
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

        return from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return from_op(a.data.reshape(shape), (a,),
                       lambda g: _accum(a, g.reshape(a.shape)))

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

        return from_op(np.array(out_data), (a,), bwd)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g * b, g * a  # both rank 1 -> scalar output


def from_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, attaching the backward closure when grads are live.

    Fused ops elsewhere in the package (LSTM sequences, convolution, the
    transducer loss) use this to register hand-written backward rules.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- free functions ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return from_op(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def flip(t: Tensor, axis: int = 0) -> Tensor:
    a = _as_tensor(t)
    return from_op(np.flip(a.data, axis=axis).copy(), (a,),
                   lambda g: _accum(a, np.flip(g, axis=axis)))


def pairwise_sum(a: Tensor, b: Tensor) -> Tensor:
    """(m, h) + (n, h) -> (m, n, h): every row of a added to every row of b.

    This is the broadcast that materializes the time-by-label joint tensor.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sum needs (m,h) and (n,h), got {a.shape}, {b.shape}")

    def bwd(g):
        _accum(a, g.sum(axis=1))
        _accum(b, g.sum(axis=0))

    return from_op(a.data[:, None, :] + b.data[None, :, :], (a, b), bwd)


def log_sum_exp(x, axis=None):
    """Numerically stable ln(sum(exp(x))).

    Accepts a raw ndarray (in which case -inf entries are legal and are
    absorbed; an all -inf slice yields -inf) or a Tensor (finite by
    construction, differentiable).  Empty input is a domain error.
    """
    if isinstance(x, Tensor):
        a = x
        out_data = _lse_array(a.data, axis)

        def bwd(g):
            if axis is None:
                _accum(a, g * np.exp(a.data - out_data))
            else:
                _accum(a, np.expand_dims(g, axis)
                       * np.exp(a.data - np.expand_dims(out_data, axis)))

        return from_op(out_data, (a,), bwd)
    return _lse_array(np.asarray(x, dtype=np.float64), axis)


def _lse_array(arr: np.ndarray, axis):
    if arr.size == 0 or (axis is not None and arr.shape[axis] == 0):
        raise ValueError("log_sum_exp of empty input")
    m = np.max(arr, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - safe_m), axis=axis, keepdims=True)) + safe_m
    out = np.where(np.isfinite(m), out, -np.inf)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """ln softmax along ``axis``; backward is g - exp(y) * sum(g)."""
    a = _as_tensor(t)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def bwd(g):
        _accum(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return from_op(out_data, (a,), bwd)


def softmax(x, temperature: float = 1.0, axis: int = -1):
    """exp(x/T) normalized along ``axis``.  T must be positive.

    Works on Tensors (differentiable) and raw ndarrays alike; the argmax is
    invariant under temperature, which decoding relies on.
    """
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    if isinstance(x, Tensor):
        a = x
        out_data = _softmax_array(a.data, temperature, axis)

        def bwd(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, out_data * (g - inner) / temperature)

        return from_op(out_data, (a,), bwd)
    return _softmax_array(np.asarray(x, dtype=np.float64), temperature, axis)


def _softmax_array(arr: np.ndarray, temperature: float, axis: int) -> np.ndarray:
    scaled = arr / temperature
    scaled = scaled - np.max(scaled, axis=axis, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=axis, keepdims=True)


def dropout(t: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return t
    mask = (rng.random(t.shape) >= p).astype(t.data.dtype) / (1.0 - p)
    return t * Tensor(mask)


# -- verification ------------------------------------------------------------


def finite_difference_error(loss_fn: Callable[[], Tensor],
                            wrt: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the forward graph from the current ``.data`` of
    the tensors in ``wrt`` on every call; the harness perturbs ``.data`` in
    place and restores it.  Relative error uses max(|analytic|, |numeric|, 1)
    as the denominator so near-zero gradients are compared absolutely.
    """
    for t in wrt:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; (seed, stream) pairs never collide."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))
