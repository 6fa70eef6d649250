"""A small reverse-mode differentiation tape over numpy arrays.

Every operation appends a :class:`Node` to the tape of its inputs, so the
tape is topologically ordered by creation and :meth:`Tape.backward` is a
single reverse sweep.  Parameters are registered with :meth:`Tape.param`,
which keys leaves on the identity of the underlying array so gradients can
be looked up afterwards with :meth:`Tape.grad_of`.

>>> tape = Tape()
>>> x, y = tape.constant(2.0), tape.constant(3.0)
>>> z = mul(x, y)
>>> tape.backward(z)
>>> float(x.grad), float(y.grad)
(3.0, 2.0)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .ph import DEFAULT_CONFIG, UniformizationConfig, canonical_log_pdf_batch

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "record",
    "OPS",
    "MlpParams",
    "mlp_forward",
]


class ShapeError(ValueError):
    """Inputs of an operation have incompatible shapes."""


class Node:
    __slots__ = ("value", "grad", "parents", "op", "backward_fn", "tape", "info")

    def __init__(self, tape: "Tape", value, parents=(), op="leaf", backward_fn=None):
        self.tape = tape
        self.value = np.asarray(value, dtype=float)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.info = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records nodes in creation order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[int, Node] = {}

    def _push(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(Node(self, value))

    def param(self, array: np.ndarray) -> Node:
        """Leaf for a parameter array; the same array always maps to the same node."""
        key = id(array)
        node = self._params.get(key)
        if node is None:
            node = self._push(Node(self, array, op="param"))
            self._params[key] = node
        return node

    def grad_of(self, array: np.ndarray) -> np.ndarray:
        node = self._params.get(id(array))
        if node is None or node.grad is None:
            return np.zeros_like(array, dtype=float)
        return node.grad

    def backward(self, root: Node) -> None:
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        stop = self.nodes.index(root)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=float, copy=True).reshape(parent.value.shape)
                else:
                    parent.grad = parent.grad + g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one input must be a Node")


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _new(tape, value, parents, op, fn) -> Node:
    return tape._push(Node(tape, value, parents, op, fn))


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "add")
    return _new(tape, a.value + b.value, (a, b), "add",
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "sub")
    return _new(tape, a.value - b.value, (a, b), "sub",
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "mul")
    return _new(tape, a.value * b.value, (a, b), "mul",
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Node:
    """``a @ b`` for a 1-d or 2-d ``a`` and a 2-d ``b``."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if b.value.ndim != 2 or a.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        if a.value.ndim == 1:
            return g @ b.value.T, np.outer(a.value, g)
        return g @ b.value.T, a.value.T @ g

    return _new(tape, a.value @ b.value, (a, b), "matmul", back)


# -- elementwise unary -------------------------------------------------------

def negate(a: Node) -> Node:
    return _new(a.tape, -a.value, (a,), "negate", lambda g: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _new(a.tape, out, (a,), "exp", lambda g: (g * out,))


def log(a: Node) -> Node:
    return _new(a.tape, np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def square(a: Node) -> Node:
    return _new(a.tape, a.value**2, (a,), "square", lambda g: (2.0 * g * a.value,))


def softplus(a: Node) -> Node:
    return _new(a.tape, np.logaddexp(0.0, a.value), (a,), "softplus",
                lambda g: (g * expit(a.value),))


def relu(a: Node) -> Node:
    return _new(a.tape, np.maximum(a.value, 0.0), (a,), "relu",
                lambda g: (g * (a.value > 0),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _new(a.tape, out, (a,), "tanh", lambda g: (g * (1.0 - out**2),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (a.value >= lo) & (a.value <= hi)
    return _new(a.tape, np.clip(a.value, lo, hi), (a,), "clamp", lambda g: (g * inside,))


# -- reductions and last-axis ops --------------------------------------------

def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _new(a.tape, a.value.sum(axis=axis), (a,), "sum", back)


def mean(a: Node, axis=None) -> Node:
    count = a.value.size if axis is None else a.shape[axis]

    def back(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _new(a.tape, a.value.mean(axis=axis), (a,), "mean", back)


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _new(a.tape, s, (a,), "softmax",
                lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cumsum(a: Node) -> Node:
    """Running sum over the last axis."""
    return _new(a.tape, np.cumsum(a.value, axis=-1), (a,), "cumsum",
                lambda g: (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),))


def take(a: Node, start: int, stop: int) -> Node:
    """Slice ``[start:stop]`` of the last axis."""
    def back(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return _new(a.tape, a.value[..., start:stop], (a,), "take", back)


def reshape(a: Node, shape) -> Node:
    return _new(a.tape, a.value.reshape(shape), (a,), "reshape",
                lambda g: (g.reshape(a.shape),))


# -- phase-type likelihood ---------------------------------------------------

def ph_log_pdf(alpha: Node, rates: Node, x, cfg: UniformizationConfig = DEFAULT_CONFIG,
               terms=None) -> Node:
    """Canonical PH log-density evaluated at ``x``.

    ``alpha`` and ``rates`` have shape ``(..., m)``; ``x`` has the leading
    shape.  Gradients come from the reverse sweep over the same truncated
    series as the forward value, with the truncation indices held fixed.
    ``terms`` (an int or one count per entry of ``x``) forces those indices.
    """
    if alpha.shape != rates.shape:
        raise ShapeError(f"ph_log_pdf: alpha {alpha.shape} vs rates {rates.shape}")
    x = np.asarray(x, dtype=float)
    lead, m = alpha.shape[:-1], alpha.shape[-1]
    if x.shape != lead:
        raise ShapeError(f"ph_log_pdf: x has shape {x.shape}, expected {lead}")
    if terms is not None:
        terms = np.broadcast_to(np.asarray(terms), lead).reshape(-1)
    logf, K, vjp = canonical_log_pdf_batch(alpha.value.reshape(-1, m), rates.value.reshape(-1, m),
                                           x.reshape(-1), cfg, terms=terms, with_grad=True)

    def back(g):
        da, dr = vjp(g.reshape(-1))
        return da.reshape(alpha.shape), dr.reshape(rates.shape)

    node = _new(alpha.tape, logf.reshape(lead), (alpha, rates), "ph_log_pdf", back)
    node.info = {"terms": K.reshape(lead)}
    return node


OPS: dict[str, Callable[..., Node]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "softmax": softmax,
    "cumsum": cumsum,
    "clamp": clamp,
    "negate": negate,
    "sum": sum,
    "mean": mean,
    "square": square,
    "relu": relu,
    "tanh": tanh,
    "take": take,
    "reshape": reshape,
    "ph_log_pdf": ph_log_pdf,
}


def record(op: str, *inputs, **kwargs) -> Node:
    """Apply the named operation, recording it on the inputs' tape."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown operation {op!r}") from None
    return fn(*inputs, **kwargs)


# -- multilayer perceptron ---------------------------------------------------

_ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass
class MlpParams:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i}: shapes {W.shape}/{b.shape} do not match sizes")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu"):
        """Uniform Glorot weights and zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(list(sizes), weights, biases, activation)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def to_json(self) -> dict:
        return {
            "activation": self.activation,
            "layers": [{"shape": list(W.shape), "W": W.tolist(), "b": b.tolist()}
                       for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpParams":
        layers = obj["layers"]
        weights = [np.array(layer["W"], dtype=float).reshape(layer["shape"]) for layer in layers]
        biases = [np.array(layer["b"], dtype=float) for layer in layers]
        sizes = [weights[0].shape[0]] + [W.shape[1] for W in weights]
        return cls(sizes, weights, biases, obj.get("activation", "relu"))


def mlp_forward(params: MlpParams, x: Node) -> Node:
    """Affine layers with the hidden activation between them; last layer affine."""
    if x.shape[-1] != params.sizes[0]:
        raise ShapeError(f"mlp input width {x.shape[-1]} != {params.sizes[0]}")
    act = _ACTIVATIONS[params.activation]
    tape = x.tape
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, tape.param(W)), tape.param(b))
        if i < last:
            h = act(h)
    return h
