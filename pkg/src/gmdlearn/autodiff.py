"""Dense float64 arrays with reverse-mode differentiation.

Only what small multilayer perceptrons need: elementwise arithmetic with
broadcasting, 2-D matmul, relu/tanh, reductions and a log-softmax. Every
op result is checked for finiteness on construction.

Parameters live in :class:`ParamGroup` objects. A group owns leaf tensors in
a fixed layout; :func:`backward` returns one flat :class:`GradientVector` per
registered group, with exact zeros for groups that did not take part in the
recorded computation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

Layer = tuple[int, str]


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


class Tensor:
    """Immutable node of a recorded computation.

    ``data`` is a read-only float64 array. Non-leaf tensors keep references
    to their parents and a vector-Jacobian product closure.
    """

    __slots__ = ("data", "parents", "_vjp", "name")

    def __init__(
        self,
        data,
        parents: tuple[Tensor, ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value produced by {name or 'tensor'}")
        arr.flags.writeable = False
        self.data = arr
        self.parents = parents
        self._vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        x, y = self.data, other.data
        return Tensor(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __matmul__(self, other) -> Tensor:
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        x, w = self.data, other.data
        return Tensor(x @ w, (self, other), lambda g: (g @ w.T, x.T @ g), "matmul")

    def reshape(self, shape: tuple[int, ...]) -> Tensor:
        old = self.shape
        return Tensor(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    # elementwise ----------------------------------------------------------
    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def square(self) -> Tensor:
        x = self.data
        return Tensor(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    # reductions -----------------------------------------------------------
    def sum(self) -> Tensor:
        shape = self.shape
        return Tensor(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    def mean(self) -> Tensor:
        n = self.data.size
        shape = self.shape
        return Tensor(
            self.data.mean(), (self,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
        )

    def log_softmax(self) -> Tensor:
        """Row-wise log-softmax over the last axis, stabilised by the row max."""
        x = self.data
        shifted = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - lse
        soft = np.exp(out)
        return Tensor(
            out,
            (self,),
            lambda g: (g - soft * g.sum(axis=-1, keepdims=True),),
            "log_softmax",
        )

    def pick(self, index: np.ndarray) -> Tensor:
        """Select ``self[i, index[i]]`` for every row ``i``."""
        if self.data.ndim != 2:
            raise ValueError("pick expects a 2-D tensor")
        index = np.asarray(index, dtype=np.intp)
        if index.shape != (self.shape[0],):
            raise ValueError(f"pick index shape {index.shape} does not match {self.shape[0]} rows")
        rows = np.arange(self.shape[0])
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            full[rows, index] = g
            return (full,)

        return Tensor(self.data[rows, index], (self,), vjp, "pick")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return x.relu()
    if activation == "tanh":
        return x.tanh()
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors, accumulated left to right."""
    if not tensors:
        raise ValueError("mean of an empty list")
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total * (1.0 / len(tensors)) if len(tensors) > 1 else total


# parameter groups ---------------------------------------------------------


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient aligned with the layout of one parameter group."""

    group_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(values).all():
            raise NumericalError(f"non-finite gradient for group {self.group_id!r}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def replace(self, values: np.ndarray) -> GradientVector:
        return GradientVector(self.group_id, values)


class ParamGroup:
    """Named leaf tensors flattened in insertion order.

    The layout (tensor names and shapes, in order) is fixed at construction;
    :meth:`flatten` concatenates row-major tensor data in that order.
    """

    def __init__(self, group_id: str, tensors: Mapping[str, np.ndarray]):
        self.id = group_id
        self.tensors: dict[str, Tensor] = {
            name: Tensor(value, name=f"{group_id}.{name}") for name, value in tensors.items()
        }
        self.layout: tuple[tuple[str, tuple[int, ...]], ...] = tuple(
            (name, t.shape) for name, t in self.tensors.items()
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __repr__(self) -> str:
        return f"ParamGroup({self.id!r}, size={self.size})"

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def flatten(self) -> np.ndarray:
        return flatten_arrays(self, {name: t.data for name, t in self.tensors.items()})

    def with_values(self, flat: np.ndarray) -> ParamGroup:
        """New group with the same layout holding ``flat``."""
        return ParamGroup(self.id, unflatten(self, flat))


def flatten_arrays(group: ParamGroup, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
    parts = []
    for name, shape in group.layout:
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{group.id}.{name}: expected shape {shape}, got {arr.shape}")
        parts.append(arr.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def flatten(group: ParamGroup, grads: Mapping[str, np.ndarray]) -> GradientVector:
    """Per-tensor gradients of ``group`` as one flat vector in layout order."""
    return GradientVector(group.id, flatten_arrays(group, grads))


def unflatten(group: ParamGroup, flat) -> dict[str, np.ndarray]:
    """Inverse of :func:`flatten`; accepts a GradientVector or a plain array."""
    if isinstance(flat, GradientVector):
        if flat.group_id != group.id:
            raise ValueError(f"gradient for {flat.group_id!r} does not belong to {group.id!r}")
        flat = flat.values
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    if flat.size != group.size:
        raise ValueError(f"{group.id}: expected {group.size} values, got {flat.size}")
    out, offset = {}, 0
    for name, shape in group.layout:
        n = int(np.prod(shape))
        out[name] = flat[offset : offset + n].reshape(shape).copy()
        offset += n
    return out


def init_mlp(group_id: str, in_dim: int, arch: Sequence[Layer], rng: np.random.Generator) -> ParamGroup:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    tensors = {}
    fan_in = in_dim
    for i, (width, activation) in enumerate(arch):
        _check_layer(width, activation)
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, width))
        tensors[f"b{i}"] = rng.uniform(-bound, bound, size=(width,))
        fan_in = width
    return ParamGroup(group_id, tensors)


def _check_layer(width, activation):
    if int(width) < 1:
        raise ValueError(f"layer width must be >= 1, got {width}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def forward_mlp(params: ParamGroup, x: Tensor | np.ndarray, arch: Sequence[Layer]) -> Tensor:
    """Apply ``act(x @ W_i + b_i)`` layer by layer.

    ``x`` is ``(batch, in)`` or a single ``(in,)`` vector; the output keeps
    the same rank.
    """
    x = _as_tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = x.reshape((1, x.shape[0]))
    if x.data.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D input, got shape {x.shape}")
    for i, (width, activation) in enumerate(arch):
        _check_layer(width, activation)
        try:
            W, b = params[f"W{i}"], params[f"b{i}"]
        except KeyError:
            raise ValueError(f"group {params.id!r} has no parameters for layer {i}") from None
        if W.shape != (x.shape[1], width):
            raise ValueError(
                f"layer {i} of {params.id!r}: input width {x.shape[1]} and width {width} "
                f"do not match weight shape {W.shape}"
            )
        x = activate(x @ W + b, activation)
    return x.reshape((x.shape[1],)) if squeeze else x


# reverse pass -------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, groups: Iterable[ParamGroup]) -> dict[str, GradientVector]:
    """Gradients of a scalar ``loss`` for every parameter in ``groups``."""
    if not isinstance(loss, Tensor) or loss.is_leaf:
        raise ValueError("backward needs the output of a recorded forward computation")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for group in groups:
        per_tensor = {
            name: leaf_grads.get(id(t), np.zeros(t.shape)) for name, t in group.tensors.items()
        }
        out[group.id] = flatten(group, per_tensor)
    return out
