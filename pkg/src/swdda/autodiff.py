"""Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

Graphs are built define-by-run: every op on a :class:`Tensor` that needs a
gradient records its parents and a backward closure. :func:`backward` orders
the reachable nodes by creation sequence (the :class:`Tape`) and sweeps them in
reverse, accumulating gradients additively.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

_sequence = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Dense 2-D array of 64-bit reals with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    """Wrap an op result; record graph linkage only if some parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None  # filled by backward()
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_fn if out.requires_grad else None
    out._seq = next(_sequence)
    out.op = op
    return out


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward_fn(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), backward_fn, "matmul")


def add_bias(x, b):
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"bias must be 1x{x.cols}, got {b.shape}")

    def backward_fn(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(x.data + b.data, (x, b), backward_fn, "add_bias")


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x, c):
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x):
    X = x.data
    return _make(X * X, (x,), lambda g: (2.0 * X * g,), "square")


def absolute(x):
    """Elementwise |x|; the subgradient at exactly 0 is 0."""
    X = x.data
    return _make(np.abs(X), (x,), lambda g: (np.sign(X) * g,), "abs")


def relu(x):
    """Elementwise max(x, 0). Gradient passes where x > 0 only (0 at x == 0)."""
    X = x.data
    mask = X > 0
    return _make(np.where(mask, X, 0.0), (x,), lambda g: (g * mask,), "relu")


def transpose(x):
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def total(x):
    """Sum of all entries as a 1x1 tensor."""
    shape = x.shape
    return _make(np.array([[x.data.sum()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(x):
    shape = x.shape
    n = x.data.size
    return _make(np.array([[x.data.sum() / n]]), (x,),
                 lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def softmax(x):
    """Row-wise softmax."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    S = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (S * (g - (g * S).sum(axis=1, keepdims=True)),)

    return _make(S, (x,), backward_fn, "softmax")


def softmax_cross_entropy_mean(logits, labels):
    """Mean over rows of -log softmax(logits)[label], stabilised by row-max shift."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    if n < 1:
        raise ShapeError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].sum() / n

    def backward_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return _make(np.array([[loss]]), (logits,), backward_fn, "cross_entropy")


def sort_permutation(x):
    """Stable ascending argsort of a 1xN (or flat) tensor.

    Ties resolve to ascending original index. The permutation is a constant of
    the backward pass.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[0] == 1:
        arr = arr[0]
    if np.isnan(arr).any():
        raise ValueError("cannot sort values containing NaN")
    return np.argsort(arr, axis=-1, kind="stable")


def sort_permutation_rows(x):
    """Row-wise stable argsort of an MxN block; always returns MxN."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("expected a 2-D block")
    if np.isnan(arr).any():
        raise ValueError("cannot sort values containing NaN")
    return np.argsort(arr, axis=1, kind="stable")


def _check_perm(perm, n):
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise IndexError(f"permutation must be {n} integers")
    seen = np.zeros(n, dtype=bool)
    if perm.min(initial=0) < 0 or perm.max(initial=0) >= n:
        raise IndexError("permutation index out of range")
    seen[perm] = True
    if not seen.all():
        raise IndexError("not a permutation")
    return perm


def gather(x, perm):
    """out[j] = x[perm[j]] on a 1xN tensor; backward scatters via the inverse."""
    if x.rows != 1:
        raise ShapeError(f"gather expects 1xN, got {x.shape}")
    perm = _check_perm(perm, x.cols)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)

    def backward_fn(g):
        return (g[:, inv],)

    return _make(x.data[:, perm], (x,), backward_fn, "gather")


def gather_rows(x, perms):
    """Row-batched :func:`gather`: out[m, j] = x[m, perms[m, j]]."""
    perms = np.asarray(perms)
    if perms.shape != x.shape or not np.issubdtype(perms.dtype, np.integer):
        raise ShapeError(f"permutation block {perms.shape} vs tensor {x.shape}")
    if not np.array_equal(np.sort(perms, axis=1), np.broadcast_to(np.arange(x.cols), perms.shape)):
        raise IndexError("every row must be a permutation")
    rows = np.arange(x.rows)[:, None]

    def backward_fn(g):
        out = np.zeros_like(g)
        out[rows, perms] = g
        return (out,)

    return _make(x.data[rows, perms], (x,), backward_fn, "gather_rows")


def grad_reverse(x, lam=1.0):
    """Identity forward; the backward pass multiplies the upstream gradient by -lam."""
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValueError("grad_reverse lambda must be finite")
    return _make(x.data.copy(), (x,), lambda g: (g * -lam,), "grad_reverse")


# ---------------------------------------------------------------------------
# tape and backward sweep
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Op nodes reachable from a loss, in creation order."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss):
        seen = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))


def backward(loss, tape=None):
    """Populate ``.grad`` on every requires_grad tensor that ``loss`` depends on.

    The seed gradient is 1. Gradients add onto whatever ``.grad`` already holds;
    call ``zero_grad`` between independent passes.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape if tape is not None else Tape.from_loss(loss)
    upstream = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fp = f(Tensor(plus)).item()
        fm = f(Tensor(minus)).item()
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-parameter-group optimizer state.

    Weight decay is coupled: ``weight_decay * param`` is added to the gradient
    before the update rule.
    """

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: Optional[List[np.ndarray]] = None
    second_moment: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        for name in ("lr", "momentum", "beta1", "beta2", "eps", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def optimizer_step(state: OptimizerState, params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]] = None):
    """Apply one update in place to ``params``; ``grads`` default to ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient {np.shape(g)} does not match parameter {p.shape}")
    if state.first_moment is None:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    elif [m.shape for m in state.first_moment] != [p.shape for p in params]:
        raise ShapeError("optimizer state does not match parameters")

    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.kind == "sgd_momentum":
            buf = state.momentum * state.first_moment[i] + g
            state.first_moment[i] = buf
            p.data = p.data - state.lr * buf
        else:
            m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g
            v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g
            state.first_moment[i] = m
            state.second_moment[i] = v
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
