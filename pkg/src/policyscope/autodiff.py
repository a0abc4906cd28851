"""Reverse-mode automatic differentiation over 2-D float64 arrays.

Operations are recorded on a :class:`Tape` as they execute (define-by-run).
When none of an operation's inputs is a :class:`Var` the operation returns
a plain ``numpy.ndarray`` and nothing is recorded, so the same model code
serves both training (with a tape) and fast inference (without one).

The primitive set is deliberately small::

    matmul (optionally masked), add, mul, tanh, sigmoid, exp, log,
    sum, logsumexp

Subtraction, negation and scaling are expressed through ``add``/``mul``.
Broadcasting is supported for 2-D operands along axes of length one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

ArrayLike = Union["Var", np.ndarray, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (e.g. backward before forward)."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


class Var:
    """A node on a tape: a value plus the recipe for propagating gradients."""

    __slots__ = ("value", "grad", "tape", "op", "parents", "_backward", "index", "name")

    def __init__(self, value, tape: "Tape", op: str = "leaf", parents=(), backward=None, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name
        self.index = tape._record(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, which is a valid topological
    order, so the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.output: Optional[Var] = None

    def _record(self, node: Var) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name: Optional[str] = None) -> Var:
        """Register a differentiable input."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"leaf {name!r}: expected a 2-D array, got shape {arr.shape}")
        return Var(arr, self, "leaf", (), None, name)

    def backward(self, output: Optional[Var] = None) -> None:
        """Propagate d(output)/d(node) into ``node.grad`` for every node."""
        if output is None:
            output = self.output
        if output is None or not self.nodes:
            raise TapeError("backward called before any forward evaluation on this tape")
        if output.tape is not self:
            raise TapeError("output does not belong to this tape")
        if output.value.size != 1:
            raise TapeError(f"backward requires a scalar output, got shape {output.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# helpers


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _accumulate(x, g):
    if not isinstance(x, Var):
        return
    g = _unbroadcast(g, x.value.shape)
    if x.grad is None:
        x.grad = g
    else:
        x.grad = x.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a, b) -> Tuple[int, ...]:
    sa, sb = np.shape(a), np.shape(b)
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}") from None


def _node_label(op: str, tape: Optional[Tape]) -> str:
    pos = len(tape.nodes) if tape is not None else "-"
    return f"{op} (node {pos})"


# ---------------------------------------------------------------------------
# primitives


def matmul(x, w, mask: Optional[np.ndarray] = None):
    """``x @ (w * mask)``; the mask also gates the gradient of ``w``."""
    tape = _tape_of(x, w)
    xv, wv = _val(x), _val(w)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"{_node_label('matmul', tape)}: shapes {xv.shape} @ {wv.shape} do not align")
    if mask is not None:
        if mask.shape != wv.shape:
            raise ShapeError(f"{_node_label('matmul', tape)}: mask {mask.shape} != weight {wv.shape}")
        wv = wv * mask
    out = xv @ wv
    if tape is None:
        return out

    def backward(g):
        if isinstance(x, Var):
            _accumulate(x, g @ wv.T)
        if isinstance(w, Var):
            gw = xv.T @ g
            if mask is not None:
                gw = gw * mask
            _accumulate(w, gw)

    return Var(out, tape, "matmul", (x, w), backward)


def add(a, b):
    tape = _tape_of(a, b)
    _broadcast_shape(_node_label("add", tape), _val(a), _val(b))
    out = _val(a) + _val(b)
    if tape is None:
        return out

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Var(out, tape, "add", (a, b), backward)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    _broadcast_shape(_node_label("mul", tape), av, bv)
    out = av * bv
    if tape is None:
        return out

    def backward(g):
        if isinstance(a, Var):
            _accumulate(a, g * bv)
        if isinstance(b, Var):
            _accumulate(b, g * av)

    return Var(out, tape, "mul", (a, b), backward)


def tanh(x):
    out = np.tanh(_val(x))
    if not isinstance(x, Var):
        return out

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return Var(out, x.tape, "tanh", (x,), backward)


def sigmoid(x):
    xv = _val(x)
    out = np.exp(-np.logaddexp(0.0, -xv))
    if not isinstance(x, Var):
        return out

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return Var(out, x.tape, "sigmoid", (x,), backward)


def exp(x):
    out = np.exp(_val(x))
    if not isinstance(x, Var):
        return out

    def backward(g):
        _accumulate(x, g * out)

    return Var(out, x.tape, "exp", (x,), backward)


def log(x):
    xv = _val(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out

    def backward(g):
        _accumulate(x, g / xv)

    return Var(out, x.tape, "log", (x,), backward)


def sum(x, axis: Optional[int] = None):  # noqa: A001 - mirrors numpy naming
    """Sum over ``axis`` (keeping it as length one) or over everything."""
    xv = _val(x)
    out = xv.sum(axis=axis, keepdims=True) if axis is not None else np.sum(xv).reshape(1, 1)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g, shape))

    return Var(out, x.tape, "sum", (x,), backward)


def logsumexp(x, axis: Optional[int] = None):
    xv = _val(x)
    if axis is None:
        m = np.max(xv)
        shifted = np.exp(xv - m)
        total = shifted.sum()
        out = (np.log(total) + m).reshape(1, 1)
        soft = shifted / total
    else:
        m = np.max(xv, axis=axis, keepdims=True)
        shifted = np.exp(xv - m)
        total = shifted.sum(axis=axis, keepdims=True)
        out = np.log(total) + m
        soft = shifted / total
    if not isinstance(x, Var):
        return out

    def backward(g):
        _accumulate(x, g * soft)

    return Var(out, x.tape, "logsumexp", (x,), backward)


PRIMITIVES: Dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum,
    "logsumexp": logsumexp,
}


def forward_eval(fn: Callable[..., Var], params: Mapping[str, np.ndarray]) -> Tuple[float, Tape, Dict[str, Var]]:
    """Run ``fn(**leaves)`` on a fresh tape; returns (loss, tape, leaves)."""
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        raise TapeError("loss function did not depend on any differentiable input")
    if out.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {out.shape} from node {out.index} ({out.op})")
    tape.output = out
    return float(out.value.reshape(())), tape, leaves


def value_and_grad(fn: Callable[[Dict[str, Var]], Var], params: Mapping[str, np.ndarray]):
    """Evaluate a scalar loss and its gradient w.r.t. every entry of ``params``."""
    loss, tape, leaves = forward_eval(fn, params)
    tape.backward()
    grads = {}
    for k, leaf in leaves.items():
        g = leaf.grad
        grads[k] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient {k!r} shape {g.shape} != parameter shape {params[k].shape}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        m = state.first_moment.get(k, np.zeros_like(p))
        v = state.second_moment.get(k, np.zeros_like(p))
        if g is None:
            new_params[k], m_new[k], v_new[k] = p, m, v
            continue
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[k] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        m_new[k], v_new[k] = m, v
    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step_count=t,
        first_moment=m_new,
        second_moment=v_new,
    )
    return new_params, new_state
