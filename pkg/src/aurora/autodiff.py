"""Dense float64 tensors with reverse-mode autodiff, plus RNG and optimizers.

Tensors are plain ``numpy.ndarray`` objects in float64; ``Var`` wraps a value
into a define-by-run graph node. Graphs are rebuilt per minibatch and torn
down with the Python objects, so there is no tape to reset.

Supported broadcasting is deliberately narrow: equal shapes, scalars,
a ``(d,)`` vector against ``(B, d)`` rows, and a ``(B, 1)`` column against
``(B, d)``. Anything else raises ``DimensionError``.

Randomness comes from ``Rng``, a thin wrapper over NumPy's Philox 4x64
counter-based bit generator keyed by ``(seed, tag)``. Philox guarantees the
same draw sequence for the same key on every platform, which is what makes
cohort generation and training bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Tensor = np.ndarray  # row-major float64 throughout


def as_tensor(x, name: str = "tensor") -> Tensor:
    """Coerce to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


class Var:
    """One node of the computation graph.

    ``parents`` holds ``(parent, pullback)`` pairs where ``pullback`` maps the
    incoming gradient to the parent's gradient contribution. ``grad`` stays
    None until ``backward`` reaches the node.
    """

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = as_tensor(value, "node value")
        self.grad: Tensor | None = None
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={not self.parents})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _check_broadcast(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    if len(sa) == 2 and len(sb) == 2 and sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1):
        return
    raise DimensionError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce gradient ``g`` back to ``shape`` after a broadcast op."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(g.shape) == 2 and shape == (g.shape[1],):
        return g.sum(axis=0)
    if len(g.shape) == 2 and shape == (g.shape[0], 1):
        return g.sum(axis=1, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def const(x) -> Var:
    """A graph constant; gradients are never propagated into it."""
    return Var(x)


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    return Var(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    return Var(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape)
    return Var(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def neg(a) -> Var:
    a = _wrap(a)
    return Var(-a.value, [(a, lambda g: -g)])


def matmul(a, b) -> Var:
    """2-D matrix product with the standard transpose pullbacks."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects (m,k)x(k,n), got {a.shape} and {b.shape}")
    return Var(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def transpose(a) -> Var:
    a = _wrap(a)
    return Var(a.value.T, [(a, lambda g: g.T)])


def relu(a) -> Var:
    """max(0, x); derivative at exactly 0 is defined as 0."""
    a = _wrap(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def exp(a) -> Var:
    a = _wrap(a)
    out = np.exp(a.value)
    return Var(out, [(a, lambda g: g * out)])


def log(a) -> Var:
    a = _wrap(a)
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    return Var(np.log(a.value), [(a, lambda g: g / a.value)])


def sqrt(a) -> Var:
    """Elementwise sqrt with subgradient 0 at 0 (matches the relu convention)."""
    a = _wrap(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)

    def back(g):
        return np.where(out > 0, 0.5 * g / safe, 0.0)

    return Var(out, [(a, back)])


def reciprocal(a) -> Var:
    a = _wrap(a)
    if np.any(a.value == 0):
        raise NumericError("reciprocal of zero")
    out = 1.0 / a.value
    return Var(out, [(a, lambda g: -g * out * out)])


def vsum(a) -> Var:
    """Sum of all entries, returned as a scalar node."""
    a = _wrap(a)
    return Var(a.value.sum(), [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def vmean(a) -> Var:
    a = _wrap(a)
    n = a.value.size
    return Var(a.value.mean(), [(a, lambda g: np.broadcast_to(g / n, a.shape).copy())])


def sum_rows(a) -> Var:
    """Row sums of a (B, d) matrix -> (B,)."""
    a = _wrap(a)
    if a.value.ndim != 2:
        raise DimensionError(f"sum_rows expects a matrix, got {a.shape}")
    return Var(a.value.sum(axis=1), [(a, lambda g: np.repeat(g[:, None], a.shape[1], axis=1))])


def mean_axis0(a) -> Var:
    """Column means of a (B, d) matrix -> (d,)."""
    a = _wrap(a)
    if a.value.ndim != 2:
        raise DimensionError(f"mean_axis0 expects a matrix, got {a.shape}")
    b = a.shape[0]
    return Var(a.value.mean(axis=0), [(a, lambda g: np.repeat(g[None, :] / b, b, axis=0))])


def gather_rows(a, idx) -> Var:
    """Select rows by integer index; pullback scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"row index out of range for {a.shape[0]} rows")

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], [(a, back)])


def scale_rows(a, s) -> Var:
    """Multiply row i of a (B, d) matrix by scalar s[i]."""
    a, s = _wrap(a), _wrap(s)
    if a.value.ndim != 2 or s.value.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows expects (B,d) and (B,), got {a.shape} and {s.shape}")
    return Var(a.value * s.value[:, None], [
        (a, lambda g: g * s.value[:, None]),
        (s, lambda g: (g * a.value).sum(axis=1)),
    ])


def log_softmax_rows(a) -> Var:
    """Numerically stable log-softmax along axis 1."""
    a = _wrap(a)
    if a.value.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a matrix, got {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logz
    soft = np.exp(out)
    return Var(out, [(a, lambda g: g - soft * g.sum(axis=1, keepdims=True))])


def stop_gradient(a) -> Var:
    a = _wrap(a)
    return Var(a.value.copy())


def backward(root: Var) -> None:
    """Populate ``grad`` on every node reachable from a scalar ``root``.

    Traversal is one reverse pass over the topological order, so each node's
    pullbacks run exactly once. Leaves that the root does not depend on keep
    ``grad is None``; read them through ``grad_of`` to get exact zeros.
    """
    if root.value.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")

    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, pull in node.parents:
            contrib = pull(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contrib


def grad_of(v: Var) -> Tensor:
    return v.grad if v.grad is not None else np.zeros_like(v.value)


def gradients(root: Var, leaves) -> list[Tensor]:
    """Run backward and return one gradient per leaf (exact zeros if unused)."""
    backward(root)
    return [grad_of(leaf) for leaf in leaves]


def grad_check(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps a Var of ``point``'s shape to a scalar Var. The caller is
    responsible for keeping ``point`` away from relu/hinge kinks.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    point = as_tensor(point, "grad_check point")

    v = Var(point)
    out = fn(v)
    if out.value.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = grad_of(v)

    flat = point.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(fn(Var(hi.reshape(point.shape))).value)
        f_lo = float(fn(Var(lo.reshape(point.shape))).value)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError("non-finite function value during grad_check")
        numeric[i] = (f_hi - f_lo) / (2.0 * step)

    a = analytic.ravel()
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0


class Rng:
    """Counter-based deterministic RNG (NumPy Philox 4x64, key = (seed, tag)).

    Identical (seed, tag) keys produce identical draw sequences on every
    platform. Streams for different purposes are separated by tag; see the
    tag constants in the modules that use them.
    """

    def __init__(self, seed: int, tag: int = 0):
        self.seed = int(seed)
        self.tag = int(tag)
        key = np.array([self.seed, self.tag], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, tag: int) -> "Rng":
        """Fresh stream with the same seed under a different tag."""
        return Rng(self.seed, tag)

    def normal(self, size=None) -> Tensor:
        return self._gen.standard_normal(size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int):
        return self._gen.permutation(n)


@dataclass
class OptimizerState:
    """First-order optimizer state; one instance per training run.

    ``kind`` is 'sgd' or 'adam'. Adam moments are allocated lazily per
    parameter name so the same state object works for any parameter dict.
    """

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ContractError("learning rate must be nonnegative")


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> dict:
    """One sgd/adam update; returns the new parameter dict.

    Moment tensors track parameter shapes; the step counter advances by
    exactly one per call regardless of how many parameters are updated.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"parameter {name!r}: shape {params[name].shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.step_count += 1
    out = {}
    if state.kind == "sgd":
        for name, p in params.items():
            g = grads.get(name)
            out[name] = p if g is None else p - state.lr * g
        return out

    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return out
