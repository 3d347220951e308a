"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small define-by-run tape. Every operation records a node (`Tensor`) holding
its forward value, its parents, and a closure implementing the exact analytic
adjoint of the forward rule. `DiffGraph` packages a computation with named
inputs so it can be re-bound and differentiated repeatedly; graphs are rebuilt
per evaluation, recorded nodes are never mutated.

Conventions:
  - everything is float64; leaf values are coerced on entry,
  - gradients at relu / leaky-relu / maximum kinks use the right-derivative,
  - every node checks its forward value for non-finite entries and fails with
    the node name, so divergence surfaces where it happens.

`scope(name)` pushes a prefix onto auto-generated node names, which makes
those failures readable ("prior/log#412" rather than "log#412").
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GraphError

__all__ = [
    "Tensor", "DiffGraph", "NonSmoothWarning", "constant", "scope",
    "evaluate", "gradient", "value_and_gradient", "check_gradient",
    "log", "exp", "square", "sqrt", "softplus", "sigmoid", "relu",
    "leaky_relu", "softmax", "maximum", "matmul", "tsum", "tmean",
    "cumsum", "reshape", "slice_last", "concat_last",
]


class NonSmoothWarning(UserWarning):
    """A finite-difference probe sits within one step of a kink."""


_scope_stack: list[str] = []
_counter = [0]


@contextmanager
def scope(name: str):
    """Prefix auto-generated node names with `name` while the context is open."""
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


def _node_name(op: str) -> str:
    _counter[0] += 1
    prefix = "/".join(_scope_stack)
    return f"{prefix}/{op}#{_counter[0]}" if prefix else f"{op}#{_counter[0]}"


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting introduced."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One recorded node of the tape: a float64 array plus its adjoint rule."""

    __slots__ = ("value", "grad", "name", "_parents", "_vjp", "_id", "_kink")

    def __init__(self, value, name=None, parents=(), vjp=None, kink=None):
        self.value = _as_f64(value)
        self.grad = None
        self.name = name or _node_name("leaf")
        self._parents = parents
        self._vjp = vjp
        self._id = _counter[0]
        self._kink = kink  # distance of inputs to the nearest non-smooth point
        if not np.all(np.isfinite(self.value)):
            raise GraphError(f"non-finite values produced at node '{self.name}'")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def backward(self) -> None:
        """Accumulate gradients of `self` (a scalar) into every ancestor."""
        if self.value.size != 1:
            raise GraphError(
                f"backward requires a scalar output, node '{self.name}' has "
                f"shape {self.value.shape}")
        order = _ancestors(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # Operator sugar; the right operand may be a python scalar or ndarray.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def _ancestors(out: Tensor) -> list[Tensor]:
    """Ancestors of `out` in creation order (a valid topological order)."""
    seen: set[int] = set()
    stack = [out]
    found: list[Tensor] = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        found.append(node)
        stack.extend(node._parents)
    found.sort(key=lambda n: n._id)
    return found


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def constant(value, name=None) -> Tensor:
    """Wrap a value as a leaf that receives no gradient."""
    t = Tensor(value, name=name or _node_name("const"))
    t._vjp = None
    return t


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    grad = _unbroadcast(grad, parent.value.shape)
    if parent.grad is None:
        parent.grad = grad
    else:
        parent.grad = parent.grad + grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, name=_node_name("add"), parents=(a, b))

    def vjp(g):
        _accumulate(a, g)
        _accumulate(b, g)

    out._vjp = vjp
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, name=_node_name("sub"), parents=(a, b))

    def vjp(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    out._vjp = vjp
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, name=_node_name("mul"), parents=(a, b))

    def vjp(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._vjp = vjp
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value, name=_node_name("div"), parents=(a, b))

    def vjp(g):
        _accumulate(a, g / b.value)
        _accumulate(b, -g * a.value / (b.value * b.value))

    out._vjp = vjp
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value, name=_node_name("neg"), parents=(a,))
    out._vjp = lambda g: _accumulate(a, -g)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. `b` must be a plain matrix; `a` may carry batch axes."""
    if b.value.ndim != 2:
        raise GraphError(
            f"matmul right operand must be 2-D, got {b.value.ndim}-D at "
            f"node '{b.name}'")
    if a.value.shape[-1] != b.value.shape[0]:
        raise GraphError(
            f"matmul shape mismatch {a.value.shape} @ {b.value.shape} "
            f"(nodes '{a.name}' @ '{b.name}')")
    out = Tensor(a.value @ b.value, name=_node_name("matmul"), parents=(a, b))

    def vjp(g):
        _accumulate(a, g @ b.value.T)
        a2 = a.value.reshape(-1, a.value.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(b, a2.T @ g2)

    out._vjp = vjp
    return out


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all entries (axis=None) or over the last axis (axis=-1)."""
    if axis not in (None, -1):
        raise GraphError("tsum supports axis=None or axis=-1")
    out = Tensor(a.value.sum(axis=axis), name=_node_name("sum"), parents=(a,))

    if axis is None:
        out._vjp = lambda g: _accumulate(a, np.broadcast_to(g, a.value.shape))
    else:
        out._vjp = lambda g: _accumulate(
            a, np.broadcast_to(g[..., None], a.value.shape))
    return out


def tmean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.value.size)


def log(a: Tensor) -> Tensor:
    name = _node_name("log")
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log(a.value)
    out = Tensor(value, name=name, parents=(a,))
    out._vjp = lambda g: _accumulate(a, g / a.value)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.value), name=_node_name("exp"), parents=(a,))
    out._vjp = lambda g: _accumulate(a, g * out.value)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.value * a.value, name=_node_name("square"), parents=(a,))
    out._vjp = lambda g: _accumulate(a, 2.0 * a.value * g)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.value), name=_node_name("sqrt"), parents=(a,))
    out._vjp = lambda g: _accumulate(a, g / (2.0 * out.value))
    return out


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.value), name=_node_name("softplus"),
                 parents=(a,))
    out._vjp = lambda g: _accumulate(a, g * _expit(a.value))
    return out


def _expit(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_expit(a.value), name=_node_name("sigmoid"), parents=(a,))
    out._vjp = lambda g: _accumulate(a, g * out.value * (1.0 - out.value))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.value, 0.0), name=_node_name("relu"),
                 parents=(a,), kink=float(np.min(np.abs(a.value))))
    out._vjp = lambda g: _accumulate(a, g * (a.value >= 0.0))
    return out


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.value >= 0.0
    out = Tensor(np.where(mask, a.value, slope * a.value),
                 name=_node_name("leaky_relu"), parents=(a,),
                 kink=float(np.min(np.abs(a.value))))
    out._vjp = lambda g: _accumulate(a, g * np.where(mask, 1.0, slope))
    return out


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a constant; right-derivative at the tie."""
    out = Tensor(np.maximum(a.value, c), name=_node_name("maximum"),
                 parents=(a,), kink=float(np.min(np.abs(a.value - c))))
    out._vjp = lambda g: _accumulate(a, g * (a.value >= c))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, name=_node_name("softmax"), parents=(a,))

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(a, p * (g - inner))

    out._vjp = vjp
    return out


def cumsum(a: Tensor) -> Tensor:
    """Cumulative sum along the last axis."""
    out = Tensor(np.cumsum(a.value, axis=-1), name=_node_name("cumsum"),
                 parents=(a,))

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
        _accumulate(a, rev)

    out._vjp = vjp
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.value.reshape(shape), name=_node_name("reshape"),
                 parents=(a,))
    out._vjp = lambda g: _accumulate(a, g.reshape(a.value.shape))
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the last axis."""
    out = Tensor(a.value[..., start:stop], name=_node_name("slice"),
                 parents=(a,))

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        _accumulate(a, full)

    out._vjp = vjp
    return out


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=-1),
                 name=_node_name("concat"), parents=tuple(parts))
    sizes = [p.value.shape[-1] for p in parts]

    def vjp(g):
        offset = 0
        for p, size in zip(parts, sizes):
            _accumulate(p, g[..., offset:offset + size])
            offset += size

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# graphs with named inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffGraph:
    """A re-bindable differentiable computation with named array inputs.

    `build` receives one leaf Tensor per declared input and returns the output
    Tensor; it is re-run on every evaluation, so data-dependent selections
    (spline bins, activation masks) are recorded fresh each time.
    """

    inputs: Mapping[str, tuple[int, ...]]
    build: Callable[[dict[str, Tensor]], Tensor]

    def bind(self, bindings: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        unknown = set(bindings) - set(self.inputs)
        if unknown:
            raise GraphError(f"bindings for unknown inputs: {sorted(unknown)}")
        leaves = {}
        for name, shape in self.inputs.items():
            if name not in bindings:
                raise GraphError(f"unbound input '{name}'")
            value = _as_f64(bindings[name])
            if value.shape != tuple(shape):
                raise GraphError(
                    f"input '{name}' expects shape {tuple(shape)}, got "
                    f"{value.shape}")
            leaves[name] = Tensor(value, name=name)
        return leaves


def _trace(graph: DiffGraph, bindings) -> tuple[Tensor, dict[str, Tensor]]:
    leaves = graph.bind(bindings)
    # Non-finite intermediates raise a named GraphError from the node
    # constructor; numpy's own warnings would only duplicate that.
    with np.errstate(all="ignore"):
        out = graph.build(dict(leaves))
    return out, leaves


def evaluate(graph: DiffGraph, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Forward value of the graph; deterministic for fixed bindings."""
    out, _ = _trace(graph, bindings)
    return out.value.copy()


def value_and_gradient(graph, bindings):
    """Forward value plus d(output)/d(input) for every declared input."""
    out, leaves = _trace(graph, bindings)
    out.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = (np.zeros_like(leaf.value) if leaf.grad is None
                       else leaf.grad)
    return out.value.copy(), grads


def gradient(graph: DiffGraph, bindings) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the scalar output for every input."""
    return value_and_gradient(graph, bindings)[1]


def _warn_kinks(out: Tensor, step: float) -> list[str]:
    flagged = [n.name for n in _ancestors(out)
               if n._kink is not None and n._kink <= step]
    if flagged:
        warnings.warn(
            "finite differences cross a non-smooth point at node(s): "
            + ", ".join(flagged), NonSmoothWarning)
    return flagged


def check_gradient(graph: DiffGraph, bindings, step: float = 1e-5) -> float:
    """Max relative error of analytic gradients against central differences.

    Per coordinate: |analytic - central| / (|central| + 1e-12). Probes that
    sit within `step` of a relu / leaky-relu / maximum kink are reported with
    a NonSmoothWarning instead of failing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out, _ = _trace(graph, bindings)
    _warn_kinks(out, step)
    grads = gradient(graph, bindings)
    worst = 0.0
    work = {name: _as_f64(v).copy() for name, v in bindings.items()}
    for name in sorted(graph.inputs):
        array = work[name]
        flat = array.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = float(evaluate(graph, work))
            flat[i] = original - step
            down = float(evaluate(graph, work))
            flat[i] = original
            central = (up - down) / (2.0 * step)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - central) / (abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
