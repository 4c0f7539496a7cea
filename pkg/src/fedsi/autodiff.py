"""Taped reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every primitive applied to its tensors while computing
the values eagerly.  The recording can be replayed with new input values
(:meth:`Graph.evaluate`) and differentiated in reverse (:func:`gradient`).

    g = Graph()
    x = g.input("x", [1.0, 2.0, 3.0])
    g.output("y", (x * x).sum())
    gradient(g, "y", {"x": g.value_of("x")})  # {"x": [2., 4., 6.]}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operands of a primitive do not conform."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


# --------------------------------------------------------------------------- #
# Parameter containers
# --------------------------------------------------------------------------- #


class ParamTree(Mapping[str, np.ndarray]):
    """Ordered name -> float64 array mapping, flattenable to one vector."""

    def __init__(self, items: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._d: dict[str, np.ndarray] = {
            k: np.array(v, dtype=np.float64) for k, v in pairs
        }

    def __getitem__(self, key: str) -> np.ndarray:
        return self._d[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self._d.items())
        return f"ParamTree({shapes})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._d.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._d.values())

    def segments(self) -> list[tuple[str, int, int]]:
        """(name, start, stop) of each tensor inside :meth:`flatten`."""
        out, pos = [], 0
        for k, v in self._d.items():
            out.append((k, pos, pos + v.size))
            pos += v.size
        return out

    def flatten(self) -> np.ndarray:
        if not self._d:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._d.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamTree":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        return ParamTree(
            (k, flat[a:b].reshape(self._d[k].shape)) for k, a, b in self.segments()
        )

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamTree":
        return ParamTree((k, fn(v)) for k, v in self._d.items())

    def zeros_like(self) -> "ParamTree":
        return self.map(np.zeros_like)


# --------------------------------------------------------------------------- #
# Primitives
# --------------------------------------------------------------------------- #


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _matmul_bwd(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
    gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
    return ga, gb


def _max_fwd(x, axis=None, keepdims=False):
    return np.max(x, axis=axis, keepdims=keepdims)


def _max_bwd(g, out, x, axis=None, keepdims=False):
    # Gradient goes to the first maximal index (np.argmax tie-break).
    gx = np.zeros_like(x)
    if axis is None:
        gx.flat[np.argmax(x)] = g
        return (gx,)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    gk = g if keepdims else np.expand_dims(g, axis)
    np.put_along_axis(gx, idx, gk, axis=axis)
    return (gx,)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis
               for k in items)


def _getitem_bwd(g, out, x, key):
    gx = np.zeros_like(x)
    if _is_basic_key(key):
        gx[key] = g
    else:
        np.add.at(gx, key, g)
    return (gx,)


def _take_bwd(g, out, table, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, ids.ravel(), g.reshape(ids.size, *table.shape[1:]))
    return (gt,)


def _concat_bwd(g, out, *xs, axis):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _stack_bwd(g, out, *xs, axis):
    return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))


def _div_bwd(g, out, a, b):
    ga = _unbroadcast(g / b, a.shape)
    gb = _unbroadcast(-g * out / b, b.shape)
    return ga, gb


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple[np.ndarray, ...]]


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": Primitive(np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": Primitive(np.multiply, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "div": Primitive(np.divide, _div_bwd),
    "neg": Primitive(np.negative, lambda g, o, x: (-g,)),
    "matmul": Primitive(np.matmul, _matmul_bwd),
    # derivative at exactly 0 is 0
    "relu": Primitive(lambda x: np.maximum(x, 0.0), lambda g, o, x: (g * (x > 0),)),
    "abs": Primitive(np.abs, lambda g, o, x: (g * np.sign(x),)),
    "exp": Primitive(np.exp, lambda g, o, x: (g * o,)),
    "log": Primitive(np.log, lambda g, o, x: (g / x,)),
    "sqrt": Primitive(np.sqrt, lambda g, o, x: (g * 0.5 / o,)),
    "sigmoid": Primitive(expit, lambda g, o, x: (g * o * (1.0 - o),)),
    "tanh": Primitive(np.tanh, lambda g, o, x: (g * (1.0 - o * o),)),
    "clamp_min": Primitive(
        lambda x, lo: np.maximum(x, lo), lambda g, o, x, lo: (g * (x >= lo),)
    ),
    "max": Primitive(_max_fwd, _max_bwd),
    "sum": Primitive(
        lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, o, x, axis=None, keepdims=False: (_expand_reduced(g, x.shape, axis, keepdims),),
    ),
    "reshape": Primitive(
        lambda x, shape: np.reshape(x, shape), lambda g, o, x, shape: (g.reshape(x.shape),)
    ),
    "transpose": Primitive(
        lambda x, axes: np.transpose(x, axes),
        lambda g, o, x, axes: (np.transpose(g, np.argsort(axes)),),
    ),
    "getitem": Primitive(lambda x, key: x[key], _getitem_bwd),
    "take": Primitive(lambda t, ids: t[ids], _take_bwd),
    "where": Primitive(
        lambda x, mask, fill: np.where(mask, x, fill),
        lambda g, o, x, mask, fill: (_unbroadcast(np.where(mask, g, 0.0), x.shape),),
    ),
    "concat": Primitive(lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_bwd),
    "stack": Primitive(lambda *xs, axis: np.stack(xs, axis=axis), _stack_bwd),
}


# --------------------------------------------------------------------------- #
# Graph and Tensor
# --------------------------------------------------------------------------- #


@dataclass
class Node:
    op: str
    parents: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Graph:
    """Ordered record of primitive applications with their eager values.

    Nodes are appended only, so the list is always in topological order.
    Set ``check_finite=False`` to skip the per-primitive NaN/Inf check.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def input(self, name: str, value) -> "Tensor":
        if name in self.inputs:
            raise KeyError(f"input {name!r} already bound in this graph")
        # no copy: recorded inputs are treated as immutable
        node_id = self._append(Node("input", name=name), np.asarray(value, dtype=np.float64))
        self.inputs[name] = node_id
        return Tensor(self, node_id)

    def constant(self, value) -> "Tensor":
        arr = np.asarray(value, dtype=np.float64)
        return Tensor(self, self._append(Node("const", attrs={"value": arr}), arr))

    def output(self, name: str, t: "Tensor") -> "Tensor":
        if t.graph is not self:
            raise ValueError("output tensor belongs to a different graph")
        self.outputs[name] = t.node_id
        return t

    def value_of(self, name: str) -> np.ndarray:
        node_id = self.outputs.get(name, self.inputs.get(name))
        if node_id is None:
            raise KeyError(name)
        return self.values[node_id]

    def apply(self, op: str, parents: tuple["Tensor", ...], **attrs) -> "Tensor":
        ids = tuple(p.node_id for p in parents)
        value = self._run(op, [self.values[i] for i in ids], attrs)
        return Tensor(self, self._append(Node(op, ids, attrs), value))

    def _append(self, node: Node, value: np.ndarray) -> int:
        self.nodes.append(node)
        self.values.append(value)
        return len(self.nodes) - 1

    def _run(self, op: str, args: list[np.ndarray], attrs: dict) -> np.ndarray:
        try:
            value = PRIMITIVES[op].forward(*args, **attrs)
        except ValueError as exc:
            shapes = ", ".join(str(a.shape) for a in args)
            raise ShapeError(f"{op}: operands with shapes {shapes} do not conform ({exc})") from None
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
        return value

    def evaluate(self, inputs: Mapping[str, Any]) -> dict[str, np.ndarray]:
        """Replay the recording with new input values; returns all named outputs."""
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise KeyError(f"unbound graph inputs: {sorted(missing)}")
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "input":
                v = np.asarray(inputs[node.name], dtype=np.float64)
                recorded = self.values[self.inputs[node.name]]
                if v.shape != recorded.shape:
                    nid = self.inputs[node.name]
                    user = next((n.op for n in self.nodes if nid in n.parents), "output")
                    raise ShapeError(f"{user}: input {node.name!r} has shape {v.shape}, graph was "
                                     f"recorded with {recorded.shape}")
            elif node.op == "const":
                v = node.attrs["value"]
            else:
                v = self._run(node.op, [values[i] for i in node.parents], node.attrs)
            values.append(v)
        return {name: values[i] for name, i in self.outputs.items()}

    def backward(self, output: int, wrt: Iterable[int], values: list[np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Reverse accumulation from node ``output`` to the node ids in ``wrt``."""
        values = self.values if values is None else values
        wrt = set(wrt)
        needs = [False] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            needs[i] = i in wrt or any(needs[p] for p in node.parents)
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output] = np.ones_like(values[output])
        for i in range(output, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.parents:
                continue
            grads[i] = None if i not in wrt else g
            if not any(needs[p] for p in node.parents):
                continue
            pg = PRIMITIVES[node.op].backward(
                g, values[i], *(values[p] for p in node.parents), **node.attrs
            )
            for p, gp in zip(node.parents, pg):
                if not needs[p]:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        return {i: (grads[i] if grads[i] is not None else np.zeros_like(values[i])) for i in wrt}

    def _replay_values(self, inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "input":
                values.append(np.asarray(inputs[node.name], dtype=np.float64))
            elif node.op == "const":
                values.append(node.attrs["value"])
            else:
                values.append(self._run(node.op, [values[i] for i in node.parents], node.attrs))
        return values


def _lift(graph: Graph, x) -> "Tensor":
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ValueError("cannot combine tensors from different graphs")
        return x
    return graph.constant(x)


class Tensor:
    """Handle to one recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "node_id")
    __array_priority__ = 100

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.node_id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def _binary(self, op, other, reverse=False):
        other = _lift(self.graph, other)
        args = (other, self) if reverse else (self, other)
        return self.graph.apply(op, args)

    def __add__(self, o): return self._binary("add", o)
    def __radd__(self, o): return self._binary("add", o, True)
    def __sub__(self, o): return self._binary("sub", o)
    def __rsub__(self, o): return self._binary("sub", o, True)
    def __mul__(self, o): return self._binary("mul", o)
    def __rmul__(self, o): return self._binary("mul", o, True)
    def __truediv__(self, o): return self._binary("div", o)
    def __rtruediv__(self, o): return self._binary("div", o, True)
    def __matmul__(self, o): return self._binary("matmul", o)
    def __rmatmul__(self, o): return self._binary("matmul", o, True)
    def __neg__(self): return self.graph.apply("neg", (self,))

    def __getitem__(self, key):
        return self.graph.apply("getitem", (self,), key=key)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self, *axes) -> "Tensor":
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        return self.graph.apply("transpose", (self,), axes=axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", (self,), shape=tuple(shape))

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return self.graph.apply("sum", (self,), axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return self.graph.apply("max", (self,), axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------- #
# Functional primitives
# --------------------------------------------------------------------------- #


def _unary(op: str):
    def fn(x: Tensor) -> Tensor:
        return x.graph.apply(op, (x,))
    fn.__name__ = op
    return fn


relu = _unary("relu")
abs_ = _unary("abs")
exp = _unary("exp")
log = _unary("log")
sqrt = _unary("sqrt")
sigmoid = _unary("sigmoid")
tanh = _unary("tanh")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return x.graph.apply("clamp_min", (x,), lo=float(lo))


def where(mask, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` holds, the constant ``fill`` elsewhere."""
    return x.graph.apply("where", (x,), mask=np.asarray(mask, dtype=bool), fill=float(fill))


def take(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    return table.graph.apply("take", (table,), ids=np.asarray(ids, dtype=np.int64))


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    g = xs[0].graph
    return g.apply("concat", tuple(_lift(g, x) for x in xs), axis=axis)


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    g = xs[0].graph
    return g.apply("stack", tuple(_lift(g, x) for x in xs), axis=axis)


def stop_gradient(x: Tensor) -> Tensor:
    return x.graph.constant(x.value)


def lift(x) -> tuple[Tensor, Callable[[Tensor], Any]]:
    """Wrap a raw array in a throwaway graph.

    Returns the tensor and an ``unwrap`` callable that hands back a plain
    array when the caller passed one, or the tensor itself otherwise.
    """
    if isinstance(x, Tensor):
        return x, lambda t: t
    g = Graph()
    return g.input("x", x), lambda t: t.value


# --------------------------------------------------------------------------- #
# Graph-level entry points
# --------------------------------------------------------------------------- #


def evaluate(graph: Graph, inputs: Mapping[str, Any]) -> dict[str, np.ndarray]:
    return graph.evaluate(inputs)


def gradient(graph: Graph, scalar_output: str, params: Mapping[str, Any]) -> dict[str, np.ndarray]:
    """d(scalar_output)/d(param) for every name in ``params``.

    When the arrays in ``params`` are the ones recorded in the graph, the
    recorded forward values are reused; otherwise the graph is replayed at
    the supplied values first.  Names that are not graph inputs, or inputs
    that do not influence the output, get zero gradients.
    """
    out = graph.outputs[scalar_output]
    if graph.values[out].shape != ():
        raise ShapeError(f"{scalar_output!r} has shape {graph.values[out].shape}; gradient needs a rank-0 output")
    values = None
    if any(
        name in graph.inputs and params[name] is not graph.values[graph.inputs[name]]
        for name in params
    ):
        bound = {n: graph.values[i] for n, i in graph.inputs.items()}
        bound.update({n: v for n, v in params.items() if n in graph.inputs})
        values = graph._replay_values(bound)
    wrt = [graph.inputs[n] for n in params if n in graph.inputs]
    grads = graph.backward(out, wrt, values)
    result = {}
    for name, v in params.items():
        if name in graph.inputs:
            result[name] = grads[graph.inputs[name]]
        else:
            result[name] = np.zeros_like(np.asarray(v, dtype=np.float64))
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing: list[tuple[str, int, float]]
    suspect: list[tuple[str, int]]
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failing


def finite_difference_check(
    graph: Graph,
    params: Mapping[str, Any],
    h: float = 1e-5,
    tol: float = 1e-4,
    output: str | None = None,
    max_coords: int | None = None,
    floor: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    A coordinate is flagged as suspect (likely straddling a kink or a max
    tie) when its forward and backward one-sided differences disagree by
    more than ``1e-2 * max(1, |n|)``, or when a coordinate that would fail
    has a central difference that moves by more than ``tol`` (relative) on
    shrinking ``h`` tenfold, i.e. the numerical reference has not converged.
    Suspect coordinates are reported but do not count as failures.  ``max_coords`` samples coordinates per
    tensor with ``rng`` instead of checking every one.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if output is None:
        if len(graph.outputs) != 1:
            raise ValueError("graph has several outputs; name the scalar one")
        output = next(iter(graph.outputs))
    base = {n: graph.values[i] for n, i in graph.inputs.items()}
    base.update({n: np.asarray(v, dtype=np.float64) for n, v in params.items()})
    analytic = gradient(graph, output, {n: base[n] for n in params})
    f0 = float(graph.evaluate(base)[output])
    rng = rng or np.random.default_rng(0)

    max_rel, failing, suspect, checked = 0.0, [], [], 0
    def central(name, x, k, step):
        vals = []
        for s in (step, -step):
            xp = x.copy()
            xp.flat[k] += s
            vals.append(float(graph.evaluate({**base, name: xp})[output]))
        return vals

    for name in params:
        x = base[name]
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        for k in coords:
            vals = central(name, x, k, h)
            num = (vals[0] - vals[1]) / (2 * h)
            ana = float(analytic[name].flat[k])
            fwd, bwd = (vals[0] - f0) / h, (f0 - vals[1]) / h
            checked += 1
            if abs(fwd - bwd) > 1e-2 * max(1.0, abs(num)):
                suspect.append((name, int(k)))
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel >= tol:
                fine = central(name, x, k, h / 10)
                num_fine = (fine[0] - fine[1]) / (h / 5)
                if abs(num_fine - num) / max(abs(num_fine), abs(num), floor) > tol:
                    suspect.append((name, int(k)))
                    continue
            max_rel = max(max_rel, rel)
            if rel >= tol:
                failing.append((name, int(k), rel))
    return GradCheckReport(max_rel, failing, suspect, checked, tol)
