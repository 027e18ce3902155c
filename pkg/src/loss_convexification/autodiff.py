"""Dense reverse-mode automatic differentiation.

A :class:`ComputationTape` records every primitive evaluated while a loss is
built. The tape is rebuilt for each forward call and consumed by exactly one
backward pass, which fills a gradient slot for every node reachable from the
loss. All values are contiguous float64 arrays.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, PreconditionError, ShapeMismatchError, TapeConsumedError

logger = logging.getLogger(__name__)

# Dense tensors are plain float64 numpy arrays.
Tensor = np.ndarray

OMEGA = "omega"

PRIMITIVES = (
    "leaf", "const", "add", "sub", "neg", "scale", "mul", "div", "matmul",
    "transpose", "reshape", "index", "stack", "concat", "tanh", "relu", "abs",
    "sin", "cos", "exp", "sigmoid", "log", "max_reduce", "sum_reduce",
    "softmax", "log_softmax", "squared_norm",
)


def as_tensor(value: Any) -> Tensor:
    """Copy ``value`` into a contiguous, finite float64 array."""
    array = np.ascontiguousarray(np.array(value, dtype=np.float64))
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("tensor contains non-finite entries")
    return array


class ParamSet(Mapping[str, Tensor]):
    """Named, read-only weight tensors (θ).

    Shapes are fixed at construction; :meth:`replace` produces a new set with
    updated values of identical shapes.
    """

    def __init__(self, tensors: Optional[Mapping[str, Any]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, value in dict(tensors or {}).items():
            if name == OMEGA:
                raise PreconditionError(f"parameter name '{OMEGA}' is reserved for the prediction leaf")
            array = as_tensor(value)
            array.setflags(write=False)
            self._tensors[name] = array

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{name}={tuple(value.shape)}" for name, value in self._tensors.items())
        return f"ParamSet({shapes})"

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(value.shape) for name, value in self._tensors.items()}

    def replace(self, updates: Mapping[str, Any]) -> "ParamSet":
        """Return a copy with some tensors swapped for same-shaped values."""
        merged = dict(self._tensors)
        for name, value in updates.items():
            if name not in merged:
                raise PreconditionError(f"unknown parameter '{name}'")
            array = as_tensor(value)
            if array.shape != merged[name].shape:
                raise ShapeMismatchError(
                    f"parameter '{name}' has shape {merged[name].shape}, got {array.shape}"
                )
            merged[name] = array
        return ParamSet(merged)

    def extend(self, extra: Mapping[str, Any]) -> "ParamSet":
        """Return a copy with additional tensors appended."""
        clash = set(extra) & set(self._tensors)
        if clash:
            raise PreconditionError(f"duplicate parameter names: {sorted(clash)}")
        return ParamSet({**self._tensors, **dict(extra)})


@dataclass(eq=False)
class Node:
    """One recorded primitive and its cached forward value."""

    index: int
    op: str
    parents: Tuple[int, ...]
    value: Tensor
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    def item(self) -> float:
        return float(self.value.reshape(()))


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _expand_reduced(grad: Tensor, attrs: Dict[str, Any], shape: Tuple[int, ...]) -> Tensor:
    axis = attrs.get("axis")
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


def _vjp_max_reduce(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    (a,) = values
    axis = node.attrs.get("axis")
    out = np.zeros_like(a)
    if axis is None:
        out.flat[int(np.argmax(a))] = grad
        return (out,)
    # first maximal entry along the axis receives the whole gradient
    winners = np.expand_dims(np.argmax(a, axis=axis), axis)
    np.put_along_axis(out, winners, np.expand_dims(grad, axis), axis=axis)
    return (out,)


def _vjp_index(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    out = np.zeros_like(values[0])
    np.add.at(out, node.attrs["key"], grad)
    return (out,)


def _vjp_stack(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    return tuple(grad[i] for i in range(len(values)))


def _vjp_concat(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    axis = node.attrs["axis"]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tuple(np.split(grad, bounds, axis=axis))


def _vjp_softmax(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    s = node.value
    axis = node.attrs["axis"]
    return (s * (grad - np.sum(grad * s, axis=axis, keepdims=True)),)


def _vjp_log_softmax(node: Node, grad: Tensor, values: List[Tensor]) -> Tuple[Tensor, ...]:
    axis = node.attrs["axis"]
    s = np.exp(node.value)
    return (grad - s * np.sum(grad, axis=axis, keepdims=True),)


# Vector-Jacobian products: (node, upstream grad, parent values) -> parent grads
_VJPS: Dict[str, Callable[[Node, Tensor, List[Tensor]], Tuple[Tensor, ...]]] = {
    "add": lambda n, g, v: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda n, g, v: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "neg": lambda n, g, v: (-g,),
    "scale": lambda n, g, v: (g * n.attrs["factor"],),
    "mul": lambda n, g, v: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    "div": lambda n, g, v: (
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ),
    "matmul": lambda n, g, v: (g @ v[1].T, v[0].T @ g),
    "transpose": lambda n, g, v: (g.T,),
    "reshape": lambda n, g, v: (g.reshape(v[0].shape),),
    "index": _vjp_index,
    "stack": _vjp_stack,
    "concat": _vjp_concat,
    "tanh": lambda n, g, v: (g * (1.0 - n.value * n.value),),
    # subgradient 0 at the kink
    "relu": lambda n, g, v: (g * (v[0] > 0.0),),
    "abs": lambda n, g, v: (g * np.sign(v[0]),),
    "sin": lambda n, g, v: (g * np.cos(v[0]),),
    "cos": lambda n, g, v: (-g * np.sin(v[0]),),
    "exp": lambda n, g, v: (g * n.value,),
    "sigmoid": lambda n, g, v: (g * n.value * (1.0 - n.value),),
    "log": lambda n, g, v: (g / v[0],),
    "max_reduce": _vjp_max_reduce,
    "sum_reduce": lambda n, g, v: (np.array(_expand_reduced(g, n.attrs, v[0].shape)),),
    "softmax": _vjp_softmax,
    "log_softmax": _vjp_log_softmax,
    "squared_norm": lambda n, g, v: (2.0 * g * v[0],),
}


class ComputationTape:
    """Ordered record of primitive evaluations.

    Nodes are appended in evaluation order, so every node's parents precede
    it. Leaves named after parameters (and the ``omega`` leaf) are the
    variables :meth:`backward` reports gradients for.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, Node] = {}
        self.grads: List[Optional[Tensor]] = []
        self.loss: Optional[Node] = None
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _push(self, op: str, parents: Sequence[Node], value: Any, **attrs: Any) -> Node:
        index = len(self.nodes)
        value = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced at node {index} ({op})")
        node = Node(index=index, op=op, parents=tuple(p.index for p in parents), value=value, attrs=attrs)
        self.nodes.append(node)
        return node

    def _owned(self, *nodes: Node) -> None:
        for node in nodes:
            if node.index >= len(self.nodes) or self.nodes[node.index] is not node:
                raise PreconditionError(f"node {node.index} ({node.op}) belongs to another tape")

    def _broadcast_check(self, op: str, a: Node, b: Node) -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeMismatchError(
                f"node {len(self.nodes)} ({op}): incompatible shapes {a.shape} and {b.shape}"
            ) from None

    # -- leaves -------------------------------------------------------------

    def leaf(self, name: str, value: Any) -> Node:
        if name in self.leaves:
            raise PreconditionError(f"duplicate leaf name '{name}'")
        node = self._push("leaf", (), value)
        node.name = name
        self.leaves[name] = node
        return node

    def constant(self, value: Any) -> Node:
        return self._push("const", (), value)

    # -- elementwise arithmetic --------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._owned(a, b)
        self._broadcast_check("add", a, b)
        return self._push("add", (a, b), a.value + b.value)

    def sub(self, a: Node, b: Node) -> Node:
        self._owned(a, b)
        self._broadcast_check("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value)

    def neg(self, a: Node) -> Node:
        self._owned(a)
        return self._push("neg", (a,), -a.value)

    def scale(self, a: Node, factor: float) -> Node:
        self._owned(a)
        factor = float(factor)
        return self._push("scale", (a,), a.value * factor, factor=factor)

    def mul(self, a: Node, b: Node) -> Node:
        self._owned(a, b)
        self._broadcast_check("mul", a, b)
        return self._push("mul", (a, b), a.value * b.value)

    def div(self, a: Node, b: Node) -> Node:
        self._owned(a, b)
        self._broadcast_check("div", a, b)
        with np.errstate(all="ignore"):
            return self._push("div", (a, b), a.value / b.value)

    # -- linear algebra and shape ------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        self._owned(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(
                f"node {len(self.nodes)} (matmul): cannot multiply {a.shape} by {b.shape}"
            )
        return self._push("matmul", (a, b), a.value @ b.value)

    def transpose(self, a: Node) -> Node:
        self._owned(a)
        if a.value.ndim != 2:
            raise ShapeMismatchError(f"node {len(self.nodes)} (transpose): expected a matrix, got {a.shape}")
        return self._push("transpose", (a,), a.value.T)

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        self._owned(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.value.size:
            raise ShapeMismatchError(f"node {len(self.nodes)} (reshape): cannot reshape {a.shape} to {shape}")
        return self._push("reshape", (a,), a.value.reshape(shape), shape=shape)

    def index(self, a: Node, key: Any) -> Node:
        self._owned(a)
        try:
            value = a.value[key]
        except IndexError as err:
            raise ShapeMismatchError(f"node {len(self.nodes)} (index): {err}") from None
        return self._push("index", (a,), value, key=key)

    def stack(self, nodes: Sequence[Node]) -> Node:
        self._owned(*nodes)
        shapes = {n.shape for n in nodes}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"node {len(self.nodes)} (stack): mixed shapes {sorted(shapes)}")
        return self._push("stack", nodes, np.stack([n.value for n in nodes]))

    def concat(self, nodes: Sequence[Node], axis: int = 0) -> Node:
        self._owned(*nodes)
        try:
            value = np.concatenate([n.value for n in nodes], axis=axis)
        except ValueError as err:
            raise ShapeMismatchError(f"node {len(self.nodes)} (concat): {err}") from None
        return self._push("concat", nodes, value, axis=axis)

    # -- nonlinearities -----------------------------------------------------

    def tanh(self, a: Node) -> Node:
        self._owned(a)
        return self._push("tanh", (a,), np.tanh(a.value))

    def relu(self, a: Node) -> Node:
        self._owned(a)
        return self._push("relu", (a,), np.maximum(a.value, 0.0), pattern=(a.value > 0.0).tobytes())

    def abs(self, a: Node) -> Node:
        self._owned(a)
        return self._push("abs", (a,), np.abs(a.value), pattern=np.sign(a.value).tobytes())

    def sin(self, a: Node) -> Node:
        self._owned(a)
        return self._push("sin", (a,), np.sin(a.value))

    def cos(self, a: Node) -> Node:
        self._owned(a)
        return self._push("cos", (a,), np.cos(a.value))

    def exp(self, a: Node) -> Node:
        self._owned(a)
        with np.errstate(over="ignore"):
            return self._push("exp", (a,), np.exp(a.value))

    def sigmoid(self, a: Node) -> Node:
        self._owned(a)
        with np.errstate(over="ignore"):
            return self._push("sigmoid", (a,), 1.0 / (1.0 + np.exp(-a.value)))

    def log(self, a: Node) -> Node:
        self._owned(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._push("log", (a,), np.log(a.value))

    # -- reductions ---------------------------------------------------------

    def max_reduce(self, a: Node, axis: Optional[int] = None) -> Node:
        self._owned(a)
        return self._push(
            "max_reduce", (a,), np.max(a.value, axis=axis), axis=axis,
            pattern=np.argmax(a.value, axis=axis).tobytes(),
        )

    def sum_reduce(self, a: Node, axis: Optional[int] = None) -> Node:
        self._owned(a)
        return self._push("sum_reduce", (a,), np.sum(a.value, axis=axis), axis=axis)

    def softmax(self, a: Node, axis: int = -1) -> Node:
        self._owned(a)
        shifted = np.exp(a.value - np.max(a.value, axis=axis, keepdims=True))
        return self._push("softmax", (a,), shifted / np.sum(shifted, axis=axis, keepdims=True), axis=axis)

    def log_softmax(self, a: Node, axis: int = -1) -> Node:
        self._owned(a)
        shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
        value = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        return self._push("log_softmax", (a,), value, axis=axis)

    def squared_norm(self, a: Node) -> Node:
        self._owned(a)
        return self._push("squared_norm", (a,), np.sum(a.value * a.value))

    # -- reverse pass -------------------------------------------------------

    def kink_signature(self) -> Tuple[bytes, ...]:
        """Activation pattern of every non-smooth node (relu, abs, max)."""
        return tuple(node.attrs["pattern"] for node in self.nodes if "pattern" in node.attrs)

    def backward(self, loss: Optional[Node] = None) -> Dict[str, Tensor]:
        """Fill gradient slots from ``loss`` and return leaf gradients by name.

        Leaves the loss does not depend on receive all-zero gradients.
        """
        if self._consumed:
            raise TapeConsumedError("tape was already consumed by a backward pass")
        loss = loss if loss is not None else self.loss
        if loss is None:
            raise PreconditionError("no loss node given and none recorded by forward")
        self._owned(loss)
        if loss.value.size != 1:
            raise ShapeMismatchError(f"loss node {loss.index} ({loss.op}) is not scalar: {loss.shape}")

        grads: List[Optional[Tensor]] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            grad = grads[node.index]
            if grad is None or not node.parents:
                continue
            parent_values = [self.nodes[p].value for p in node.parents]
            for parent, contribution in zip(node.parents, _VJPS[node.op](node, grad, parent_values)):
                contribution = np.asarray(contribution, dtype=np.float64)
                if grads[parent] is None:
                    grads[parent] = np.array(contribution)
                else:
                    grads[parent] = grads[parent] + contribution

        self.grads = grads
        self._consumed = True
        result = {}
        for name, leaf in self.leaves.items():
            grad = grads[leaf.index]
            result[name] = np.zeros_like(leaf.value) if grad is None else grad.reshape(leaf.shape)
        return result


# Builder(tape, inputs, param leaves, omega leaf) -> scalar loss node
Builder = Callable[[ComputationTape, Sequence[Any], Mapping[str, Node], Node], Node]


def forward(
    builder: Builder, inputs: Sequence[Any], params: ParamSet, omega: Any
) -> Tuple[float, ComputationTape]:
    """Evaluate ``builder`` on a fresh tape.

    Args:
        builder: callable recording the loss on the tape it is given
        inputs: data passed through to the builder untouched; array inputs must be finite
        params: the weights θ, registered as leaves in declaration order
        omega: prediction vector (array-like or object with ``values``), registered as the ``omega`` leaf

    Returns:
        tuple: scalar loss value and the tape holding the recorded graph
    """
    for item in inputs:
        if isinstance(item, np.ndarray) and not np.all(np.isfinite(item)):
            raise NonFiniteError("forward received a non-finite input tensor")
    tape = ComputationTape()
    param_nodes = {name: tape.leaf(name, value) for name, value in params.items()}
    omega_node = tape.leaf(OMEGA, getattr(omega, "values", omega))
    loss = builder(tape, inputs, param_nodes, omega_node)
    if loss.value.size != 1:
        raise ShapeMismatchError(f"loss node {loss.index} ({loss.op}) is not scalar: {loss.shape}")
    tape.loss = loss
    return loss.item(), tape


def backward(tape: ComputationTape) -> Dict[str, Tensor]:
    """Gradients of the recorded loss w.r.t. every parameter and ``omega``."""
    return tape.backward()


@dataclass
class CoordinateCheck:
    variable: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    kink: bool = False


@dataclass
class GradientReport:
    """Per-coordinate finite-difference comparison."""

    coordinates: List[CoordinateCheck]
    step: float
    tol: float

    @property
    def kinks(self) -> List[CoordinateCheck]:
        """Coordinates sitting on a subgradient point, excluded from pass/fail."""
        return [c for c in self.coordinates if c.kink]

    @property
    def max_rel_error(self) -> float:
        smooth = [c.rel_error for c in self.coordinates if not c.kink]
        return max(smooth) if smooth else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def check_gradient(
    builder: Builder,
    params: ParamSet,
    omega: Any,
    step: float = 1e-5,
    tol: float = 1e-5,
    inputs: Sequence[Any] = (),
    wrt: str = "all",
) -> GradientReport:
    """Compare reverse-mode gradients against central finite differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1)``.
    A coordinate whose ±step evaluations cross a relu/abs/max kink is flagged
    as a subgradient point and left out of the verdict.
    """
    if step <= 0:
        raise PreconditionError(f"step must be positive, got {step}")
    if wrt not in ("all", "params", "omega"):
        raise PreconditionError(f"wrt must be 'all', 'params' or 'omega', got '{wrt}'")

    omega_values = as_tensor(getattr(omega, "values", omega))
    _, tape = forward(builder, inputs, params, omega_values)
    base_signature = tape.kink_signature()
    analytic = tape.backward()

    def probe(new_params: ParamSet, new_omega: Tensor) -> Tuple[float, Tuple[bytes, ...]]:
        value, probe_tape = forward(builder, inputs, new_params, new_omega)
        return value, probe_tape.kink_signature()

    variables: List[str] = []
    if wrt in ("all", "params"):
        variables.extend(params)
    if wrt in ("all", "omega"):
        variables.append(OMEGA)

    coordinates = []
    for name in variables:
        base = omega_values if name == OMEGA else params[name]
        for index in np.ndindex(*base.shape):
            plus, minus = np.array(base), np.array(base)
            plus[index] += step
            minus[index] -= step
            if name == OMEGA:
                f_plus, sig_plus = probe(params, plus)
                f_minus, sig_minus = probe(params, minus)
            else:
                f_plus, sig_plus = probe(params.replace({name: plus}), omega_values)
                f_minus, sig_minus = probe(params.replace({name: minus}), omega_values)
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(analytic[name][index])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1.0)
            kink = not (sig_plus == sig_minus == base_signature)
            coordinates.append(CoordinateCheck(name, tuple(index), exact, numeric, rel, kink))

    report = GradientReport(coordinates=coordinates, step=step, tol=tol)
    logger.debug(
        "gradient check: %d coordinates, %d kinks, max rel error %.3e",
        len(coordinates), len(report.kinks), report.max_rel_error,
    )
    return report
