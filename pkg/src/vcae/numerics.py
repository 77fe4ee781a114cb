"""Dense float64 arithmetic with hand-derived VJPs, counter-based RNG, and ADAM.

Everything downstream runs on 64-bit floats: the gradient-variance tracing
needs small-number fidelity that float32 does not give.  Gradients exist only
for the fixed layer vocabulary used by the models (affine maps, elementwise
nonlinearities, a handful of reductions); there is no general autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

Tensor = np.ndarray  # row-major float64 throughout


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class OracleError(RuntimeError):
    """The finite-difference oracle evaluated to a non-finite value."""


class NonFiniteGradient(RuntimeError):
    """A gradient or learning signal went non-finite; training must abort."""


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def check_finite(name: str, x) -> None:
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name} contains non-finite entries")


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1
_U01_EPS = 1e-12  # uniform01 stays inside (eps, 1-eps) so logit/log never blow up


def _finalize(z) -> np.ndarray:
    # modular uint64 arithmetic: wraparound is the point, silence the warning
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX_A
        z = (z ^ (z >> np.uint64(27))) * _MIX_B
        return z ^ (z >> np.uint64(31))


@dataclass
class RngStream:
    """Counter-based random stream.

    Draw i of a stream is a pure function of (seed, counter + i), so drawing
    n values advances the counter by exactly n and equal (seed, counter)
    always reproduce the same values, bit for bit.  Streams are never shared:
    parallel consumers get disjoint children via :meth:`split`.
    """

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.uint64(self.counter & _U64_MASK) + np.arange(1, n + 1, dtype=np.uint64)
            self.counter += n
            state = _finalize(np.uint64(self.seed & _U64_MASK)) ^ (idx * _GOLDEN)
        return _finalize(state)

    def uniform01(self, shape) -> Tensor:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return np.clip(u, _U01_EPS, 1.0 - _U01_EPS).reshape(shape)

    def std_normal(self, shape) -> Tensor:
        # inverse-CDF transform keeps the one-draw-per-value counter discipline
        return ndtri(self.uniform01(shape))

    def std_logistic(self, shape) -> Tensor:
        u = self.uniform01(shape)
        return np.log(u) - np.log1p(-u)

    def sample(self, kind: str, shape) -> Tensor:
        if kind == "uniform01":
            return self.uniform01(shape)
        if kind == "std_normal":
            return self.std_normal(shape)
        if kind == "std_logistic":
            return self.std_logistic(shape)
        raise ContractViolation(f"unknown sample kind {kind!r}")

    def split(self, tag: int) -> "RngStream":
        """Child stream with a seed derived from (seed, tag); disjoint by construction."""
        with np.errstate(over="ignore"):
            tagged = (np.asarray(tag & _U64_MASK, dtype=np.uint64) + np.uint64(1)) * _MIX_A
            child = _finalize(_finalize(np.uint64(self.seed & _U64_MASK) ^ _GOLDEN) ^ tagged)
        return RngStream(seed=int(child), counter=0)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)


# ---------------------------------------------------------------------------
# Reverse-mode graph over the fixed op vocabulary
# ---------------------------------------------------------------------------


class Node:
    """A value in the differentiable graph.

    ``value`` is always a float64 ndarray; ``vjp`` maps the incoming gradient
    to one gradient per parent.  Constants stay plain ndarrays and never enter
    the graph, which keeps backward passes minimal.
    """

    __slots__ = ("value", "parents", "vjp", "grad")
    __array_ufunc__ = None  # keep numpy from hijacking ndarray <op> Node

    def __init__(self, value, parents=(), vjp=None):
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value + other.value,
                (self, other),
                lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
            )
        c = as_tensor(other)
        return Node(self.value + c, (self,), lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __neg__(self):
        return Node(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Node) else -as_tensor(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value * other.value,
                (self, other),
                lambda g: (
                    _unbroadcast(g * other.value, self.shape),
                    _unbroadcast(g * self.value, other.shape),
                ),
            )
        c = as_tensor(other)
        return Node(self.value * c, (self,), lambda g: (_unbroadcast(g * c, self.shape),))

    __rmul__ = __mul__

    def __matmul__(self, other):
        if not isinstance(other, Node):
            other = Node(other)
        return Node(
            self.value @ other.value,
            (self, other),
            lambda g: (g @ other.value.T, self.value.T @ g),
        )

    def __rmatmul__(self, other):
        return Node(other) @ self


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def detach(x):
    """Plain ndarray view of a graph value (or the value itself if already plain)."""
    return x.value if isinstance(x, Node) else x


def backward(root: Node) -> None:
    """Reverse accumulation from a scalar root; fills ``grad`` on every node."""
    if root.value.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# -- polymorphic elementwise ops (ndarray in -> ndarray out, Node -> Node) --


def sigmoid(x):
    if isinstance(x, Node):
        y = sigmoid(x.value)
        return Node(y, (x,), lambda g: (g * y * (1.0 - y),))
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # max(y,0) + log1p(exp(-|y|)) never overflows
    if isinstance(x, Node):
        return Node(softplus(x.value), (x,), lambda g: (g * sigmoid(x.value),))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    if isinstance(x, Node):
        return Node(log_sigmoid(x.value), (x,), lambda g: (g * sigmoid(-x.value),))
    return -softplus(-x)


def tanh(x):
    if isinstance(x, Node):
        y = np.tanh(x.value)
        return Node(y, (x,), lambda g: (g * (1.0 - y * y),))
    return np.tanh(x)


def logit(x):
    """Inverse sigmoid; inputs must lie strictly inside (0, 1)."""
    p = detach(x)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ContractViolation("logit requires inputs strictly inside (0, 1)")
    if isinstance(x, Node):
        return Node(logit(x.value), (x,), lambda g: (g / (p * (1.0 - p)),))
    return np.log(x) - np.log1p(-x)


def exp(x):
    if isinstance(x, Node):
        y = np.exp(x.value)
        return Node(y, (x,), lambda g: (g * y,))
    return np.exp(x)


def clip(x, lo: float, hi: float):
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    if isinstance(x, Node):
        mask = (x.value >= lo) & (x.value <= hi)
        return Node(np.clip(x.value, lo, hi), (x,), lambda g: (g * mask,))
    return np.clip(x, lo, hi)


def sum_rows(x):
    """Per-row sum of a [batch, d] value -> [batch]."""
    if isinstance(x, Node):
        shape = x.shape
        return Node(
            x.value.sum(axis=-1),
            (x,),
            lambda g: (np.broadcast_to(g[..., None], shape).copy(),),
        )
    return x.sum(axis=-1)


def mean_all(x):
    """Mean over every element -> scalar."""
    if isinstance(x, Node):
        n = x.value.size
        shape = x.shape
        return Node(
            x.value.mean(),
            (x,),
            lambda g: (np.broadcast_to(g / n, shape).copy(),),
        )
    return np.asarray(x).mean()


_ACTIVATIONS: dict[str, Callable] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "log_sigmoid": log_sigmoid,
    "logit": logit,
}


def activation(kind: str, x):
    """Elementwise nonlinearity by name; Node in -> Node out."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractViolation(f"unknown activation {kind!r}") from None
    return fn(x)


def affine(w, b, x):
    """y = x @ w + b with b broadcast over the batch axis."""
    wv, xv = detach(w), detach(x)
    if wv.shape[0] != xv.shape[-1]:
        raise ContractViolation(
            f"affine shape mismatch: weight {wv.shape} vs input {xv.shape}"
        )
    return x @ w + b


def affine_vjp(w: Tensor, b: Tensor, x: Tensor):
    """Raw affine with its explicit VJP: returns (y, vjp(grad) -> (gw, gb, gx))."""
    if w.shape[0] != x.shape[-1]:
        raise ContractViolation(
            f"affine shape mismatch: weight {w.shape} vs input {x.shape}"
        )
    y = x @ w + b

    def vjp(grad_out: Tensor):
        return x.T @ grad_out, grad_out.sum(axis=0), grad_out @ w.T

    return y, vjp


def activation_vjp(kind: str, x: Tensor):
    """Raw elementwise nonlinearity with its explicit VJP."""
    node = activation(kind, Node(x))
    return node.value, lambda grad_out: node.vjp(grad_out)[0]


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function; the oracle all VJPs answer to."""
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"objective non-finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter ADAM moments plus the shared hyperparameters."""

    m: Tensor
    v: Tensor
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 3e-4

    @classmethod
    def zeros(cls, shape, lr: float = 3e-4) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), lr=lr)


def adam_step(param: Tensor, grad: Tensor, state: AdamState) -> None:
    """One ADAM update, in place on ``param`` and ``state``."""
    if param.shape != grad.shape:
        raise ContractViolation(
            f"adam_step shape mismatch: param {param.shape} vs grad {grad.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient at optimizer step {state.t + 1}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
