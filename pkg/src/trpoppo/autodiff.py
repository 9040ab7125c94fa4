"""Define-then-run reverse-mode differentiation over small numpy graphs.

A :class:`Graph` is an append-only list of operation records in topological
order.  Leaves are named parameters (fed from a :class:`ParamVector`), named
inputs (fed per evaluation) and constants.  Differentiation is symbolic: the
backward rule of every operation is itself written with graph operations, so
gradients can be differentiated again.  That is what makes
``hessian_vector_product`` a plain double backprop.

All values are float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

Shape = Tuple[Optional[int], ...]
ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

HVP_PREFIX = "__hvp_v__:"

# ops whose output is piecewise constant in every input
_NONDIFF = frozenset({"le_mask", "inside_mask", "zeros_like"})
# ops whose second input only contributes its runtime shape
_SHAPE_ONLY_SECOND = frozenset({"broadcast_like", "sum_to"})
_LEAVES = frozenset({"param", "input", "const"})


class GraphError(ValueError):
    """Raised on malformed graphs, bad feeds or shape mismatches."""


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    op: str
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, object] = field(default_factory=dict)


class Var:
    """Handle on a graph node with arithmetic operator overloads."""

    __slots__ = ("graph", "id")
    __array_priority__ = 1000  # keep ndarray <op> Var on our side

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    def __repr__(self) -> str:
        node = self.graph.nodes[self.id]
        return f"Var(id={self.id}, op={node.op})"

    def _wrap(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise GraphError("cannot combine nodes from different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._wrap(other))

    def __radd__(self, other):
        return self.graph.add(self._wrap(other), self)

    def __sub__(self, other):
        return self.graph.add(self, self.graph.neg(self._wrap(other)))

    def __rsub__(self, other):
        return self.graph.add(self._wrap(other), self.graph.neg(self))

    def __mul__(self, other):
        return self.graph.mul(self, self._wrap(other))

    def __rmul__(self, other):
        return self.graph.mul(self._wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.graph.mul(self, self.graph.reciprocal(other))
        return self.graph.mul(self, self.graph.const(1.0 / np.asarray(other, dtype=np.float64)))

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._wrap(other))

    @property
    def T(self) -> "Var":
        return self.graph.transpose(self)

    def tanh(self) -> "Var":
        return self.graph.tanh(self)

    def exp(self) -> "Var":
        return self.graph.exp(self)

    def log(self) -> "Var":
        return self.graph.log(self)

    def square(self) -> "Var":
        return self.graph.square(self)

    def sum(self, axis: Optional[int] = None) -> "Var":
        return self.graph.sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Var":
        return self.graph.mean(self, axis)


class Graph:
    """Append-only computation graph.

    Building is guarded by a lock; evaluation never mutates the graph and is
    safe to run concurrently once the needed gradient nodes exist.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self._grad_cache: Dict[Tuple[int, Tuple[int, ...]], Tuple[int, ...]] = {}
        self._hvp_cache: Dict[Tuple[int, Tuple[str, ...]], Tuple[int, ...]] = {}
        self._plan_cache: Dict[Tuple[int, ...], Tuple[int, ...]] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.nodes)

    # -- construction ------------------------------------------------------

    def _push(self, op: str, inputs: Iterable[Var] = (), **attrs) -> Var:
        ids = []
        for v in inputs:
            if v.graph is not self:
                raise GraphError("cannot combine nodes from different graphs")
            ids.append(v.id)
        with self._lock:
            node = Node(len(self.nodes), op, tuple(ids), attrs)
            self.nodes.append(node)
        return Var(self, node.id)

    def _leaf(self, kind: str, name: str, shape: Shape) -> Var:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        var = self._push(kind, name=name, shape=tuple(shape))
        self.leaves[name] = var.id
        return var

    def param(self, name: str, shape: Sequence[int]) -> Var:
        if any(s is None for s in shape):
            raise GraphError(f"parameter {name!r} needs a fully specified shape")
        return self._leaf("param", name, tuple(int(s) for s in shape))

    def input(self, name: str, shape: Sequence[Optional[int]]) -> Var:
        """Declare a fed input; ``None`` entries accept any size."""
        return self._leaf("input", name, tuple(shape))

    def const(self, value: ArrayLike) -> Var:
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        return self._push("const", value=arr)

    def add(self, a: Var, b: Var) -> Var:
        return self._push("add", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        return self._push("mul", (a, b))

    def neg(self, a: Var) -> Var:
        return self._push("neg", (a,))

    def matmul(self, a: Var, b: Var) -> Var:
        return self._push("matmul", (a, b))

    def transpose(self, a: Var) -> Var:
        return self._push("transpose", (a,))

    def tanh(self, a: Var) -> Var:
        return self._push("tanh", (a,))

    def exp(self, a: Var) -> Var:
        return self._push("exp", (a,))

    def log(self, a: Var) -> Var:
        return self._push("log", (a,))

    def square(self, a: Var) -> Var:
        return self._push("square", (a,))

    def reciprocal(self, a: Var) -> Var:
        return self._push("reciprocal", (a,))

    def sum(self, a: Var, axis: Optional[int] = None) -> Var:
        return self._push("sum", (a,), axis=axis)

    def mean(self, a: Var, axis: Optional[int] = None) -> Var:
        # the divisor is only known at run time, so mean is sum * (1/count)
        return self._push("mean", (a,), axis=axis)

    def expand_dims(self, a: Var, axis: int) -> Var:
        return self._push("expand_dims", (a,), axis=axis)

    def broadcast_like(self, a: Var, like: Var) -> Var:
        return self._push("broadcast_like", (a, like))

    def sum_to(self, a: Var, like: Var) -> Var:
        return self._push("sum_to", (a, like))

    def zeros_like(self, a: Var) -> Var:
        return self._push("zeros_like", (a,))

    def minimum(self, a: Var, b: Var) -> Var:
        return self._push("minimum", (a, b))

    def clip(self, a: Var, lo: float, hi: float) -> Var:
        return self._push("clip", (a,), lo=float(lo), hi=float(hi))

    def le_mask(self, a: Var, b: Var) -> Var:
        return self._push("le_mask", (a, b))

    def inside_mask(self, a: Var, lo: float, hi: float) -> Var:
        return self._push("inside_mask", (a,), lo=float(lo), hi=float(hi))

    def var(self, node_id: int) -> Var:
        return Var(self, node_id)

    # -- symbolic differentiation -----------------------------------------

    def _backward(self, node: Node, g: Var) -> Tuple[Optional[Var], ...]:
        a = Var(self, node.inputs[0]) if node.inputs else None
        b = Var(self, node.inputs[1]) if len(node.inputs) > 1 else None
        y = Var(self, node.id)
        op = node.op
        if op == "add":
            return self.sum_to(g, a), self.sum_to(g, b)
        if op == "mul":
            return self.sum_to(self.mul(g, b), a), self.sum_to(self.mul(g, a), b)
        if op == "neg":
            return (self.neg(g),)
        if op == "matmul":
            return self.matmul(g, self.transpose(b)), self.matmul(self.transpose(a), g)
        if op == "transpose":
            return (self.transpose(g),)
        if op == "tanh":
            return (self.mul(g, self.add(self.const(1.0), self.neg(self.square(y)))),)
        if op == "exp":
            return (self.mul(g, y),)
        if op == "log":
            return (self.mul(g, self.reciprocal(a)),)
        if op == "square":
            return (self.mul(self.mul(g, a), self.const(2.0)),)
        if op == "reciprocal":
            return (self.neg(self.mul(g, self.square(y))),)
        if op in ("sum", "mean"):
            axis = node.attrs["axis"]
            gg = g if axis is None else self.expand_dims(g, axis)
            if op == "mean":
                gg = self._push("div_count", (gg, a), axis=axis)
            return (self.broadcast_like(gg, a),)
        if op == "div_count":
            return self._push("div_count", (g, b), axis=node.attrs["axis"]), None
        if op == "expand_dims":
            return (self.sum(g, node.attrs["axis"]),)
        if op == "broadcast_like":
            return self.sum_to(g, a), None
        if op == "sum_to":
            return self.broadcast_like(g, a), None
        if op == "minimum":
            m = self.le_mask(a, b)
            rest = self.add(self.const(1.0), self.neg(m))
            return self.sum_to(self.mul(g, m), a), self.sum_to(self.mul(g, rest), b)
        if op == "clip":
            return (self.mul(g, self.inside_mask(a, node.attrs["lo"], node.attrs["hi"])),)
        raise GraphError(f"node {node.id}: no backward rule for op {op!r}")

    def _depends_on(self, wrt: Iterable[int], upto: int) -> List[bool]:
        dep = [False] * (upto + 1)
        for i in wrt:
            if i <= upto:
                dep[i] = True
        for node in self.nodes[: upto + 1]:
            if dep[node.id] or node.op in _LEAVES or node.op in _NONDIFF:
                continue
            ins = node.inputs[:1] if node.op in _SHAPE_ONLY_SECOND else node.inputs
            if node.op == "div_count":
                ins = node.inputs[:1]
            dep[node.id] = any(dep[i] for i in ins)
        return dep

    def grad(self, output: Var, wrt: Sequence[Var]) -> List[Var]:
        """Symbolic gradient of ``output`` (summed if not scalar) w.r.t. ``wrt``."""
        key = (output.id, tuple(w.id for w in wrt))
        with self._lock:
            if key in self._grad_cache:
                return [Var(self, i) for i in self._grad_cache[key]]
            for w in wrt:
                if self.nodes[w.id].op != "param":
                    raise GraphError(f"node {w.id} is not a parameter leaf")
            dep = self._depends_on((w.id for w in wrt), output.id)
            wanted = {w.id for w in wrt}
            pending: Dict[int, List[Var]] = {}
            if dep[output.id]:
                pending[output.id] = [self.broadcast_like(self.const(1.0), output)]
            found: Dict[int, Var] = {}
            for nid in range(output.id, -1, -1):
                parts = pending.pop(nid, None)
                if parts is None:
                    continue
                g = parts[0]
                for extra in parts[1:]:
                    g = self.add(g, extra)
                if nid in wanted:
                    found[nid] = g
                node = self.nodes[nid]
                if node.op in _LEAVES:
                    continue
                for inp, gi in zip(node.inputs, self._backward(node, g)):
                    if gi is not None and dep[inp]:
                        pending.setdefault(inp, []).append(gi)
            result = [found[w.id] if w.id in found else self.zeros_like(w) for w in wrt]
            self._grad_cache[key] = tuple(r.id for r in result)
            return result

    def hvp_nodes(self, output: Var, names: Sequence[str]) -> List[Var]:
        """Nodes computing grad(grad(output) . v) with v fed as HVP_PREFIX inputs."""
        key = (output.id, tuple(names))
        with self._lock:
            if key in self._hvp_cache:
                return [Var(self, i) for i in self._hvp_cache[key]]
            wrt = [Var(self, self.leaves[n]) for n in names]
            grads = self.grad(output, wrt)
            dot = None
            for n, w, g in zip(names, wrt, grads):
                vname = HVP_PREFIX + n
                if vname in self.leaves:
                    v = Var(self, self.leaves[vname])
                else:
                    v = self.input(vname, self.nodes[w.id].attrs["shape"])
                term = self.sum(self.mul(g, v))
                dot = term if dot is None else self.add(dot, term)
            result = self.grad(dot, wrt)
            self._hvp_cache[key] = tuple(r.id for r in result)
            return result

    # -- evaluation --------------------------------------------------------

    def _plan(self, targets: Tuple[int, ...]) -> Tuple[int, ...]:
        plan = self._plan_cache.get(targets)
        if plan is not None:
            return plan
        needed = set(targets)
        for nid in range(max(targets), -1, -1):
            if nid in needed:
                needed.update(self.nodes[nid].inputs)
        plan = tuple(sorted(needed))
        self._plan_cache[targets] = plan
        return plan

    def run(self, targets: Sequence[Var], feed: Mapping[str, np.ndarray]) -> List[np.ndarray]:
        """Forward-evaluate ``targets`` given a name -> array feed for all leaves."""
        ids = tuple(t.id for t in targets)
        vals: Dict[int, np.ndarray] = {}
        for nid in self._plan(ids):
            node = self.nodes[nid]
            if node.op in ("param", "input"):
                vals[nid] = _feed_leaf(node, feed)
                continue
            try:
                vals[nid] = _forward(node, [vals[i] for i in node.inputs])
            except (ValueError, FloatingPointError) as exc:
                raise GraphError(f"node {nid} ({node.op}): {exc}") from exc
        return [vals[i] for i in ids]


def _feed_leaf(node: Node, feed: Mapping[str, np.ndarray]) -> np.ndarray:
    name = node.attrs["name"]
    if name not in feed:
        raise GraphError(f"node {node.id}: no value fed for {node.op} {name!r}")
    arr = np.asarray(feed[name], dtype=np.float64)
    shape = node.attrs["shape"]
    if arr.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, arr.shape)):
        raise GraphError(
            f"node {node.id}: {node.op} {name!r} expects shape {shape}, got {arr.shape}"
        )
    return arr


def _sum_to(x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot reduce shape {x.shape} to {shape}")
    out = x.sum(axis=tuple(range(lead))) if lead else x
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce shape {x.shape} to {shape}")
    return out


def _forward(node: Node, args: List[np.ndarray]) -> np.ndarray:
    op = node.op
    at = node.attrs
    if op == "const":
        return at["value"]
    if op == "add":
        return args[0] + args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "neg":
        return -args[0]
    if op == "matmul":
        if args[0].ndim != 2 or args[1].ndim != 2:
            raise ValueError(f"matmul needs 2-D operands, got {args[0].shape} @ {args[1].shape}")
        return args[0] @ args[1]
    if op == "transpose":
        return args[0].T
    if op == "tanh":
        return np.tanh(args[0])
    if op == "exp":
        return np.exp(args[0])
    if op == "log":
        return np.log(args[0])
    if op == "square":
        return args[0] * args[0]
    if op == "reciprocal":
        return 1.0 / args[0]
    if op == "sum":
        return np.asarray(args[0].sum(axis=at["axis"]))
    if op == "mean":
        return np.asarray(args[0].mean(axis=at["axis"]))
    if op == "div_count":
        axis = at["axis"]
        count = args[1].size if axis is None else args[1].shape[axis]
        return args[0] / count
    if op == "expand_dims":
        return np.expand_dims(args[0], at["axis"])
    if op == "broadcast_like":
        return np.broadcast_to(args[0], args[1].shape)
    if op == "sum_to":
        return _sum_to(args[0], args[1].shape)
    if op == "zeros_like":
        return np.zeros_like(args[0])
    if op == "minimum":
        return np.minimum(args[0], args[1])
    if op == "clip":
        return np.clip(args[0], at["lo"], at["hi"])
    if op == "le_mask":
        return (args[0] <= args[1]).astype(np.float64)
    if op == "inside_mask":
        x = args[0]
        return ((x >= at["lo"]) & (x <= at["hi"])).astype(np.float64)
    raise ValueError(f"unknown op {op!r}")


# -- parameter vectors -----------------------------------------------------

LayoutEntry = Tuple[str, Tuple[int, ...], int]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter array plus a (name, shape, offset) layout."""

    values: np.ndarray
    layout: Tuple[LayoutEntry, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        layout = tuple((str(n), tuple(int(s) for s in shp), int(off)) for n, shp, off in self.layout)
        object.__setattr__(self, "layout", layout)
        total = 0
        for name, shape, offset in layout:
            if offset != total:
                raise GraphError(f"layout entry {name!r} has offset {offset}, expected {total}")
            total += int(np.prod(shape, dtype=np.int64))
        if total != values.size:
            raise GraphError(f"layout covers {total} values but array has {values.size}")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, ArrayLike]) -> "ParamVector":
        layout = []
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype=np.float64)
            layout.append((name, a.shape, offset))
            chunks.append(a.reshape(-1))
            offset += a.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, tuple(layout))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _, _ in self.layout)

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        for n, shape, offset in self.layout:
            if n == name:
                size = int(np.prod(shape, dtype=np.int64))
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def unflatten(self) -> Dict[str, np.ndarray]:
        return {n: self[n] for n in self.names}

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise GraphError(f"expected {self.values.shape} values, got {values.shape}")
        return ParamVector(values, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise GraphError("parameter layouts differ")

    def subset(self, names: Sequence[str]) -> "ParamVector":
        return ParamVector.from_arrays({n: self[n] for n in names})

    def merged(self, other: "ParamVector") -> "ParamVector":
        """Concatenate two vectors with disjoint names."""
        clash = set(self.names) & set(other.names)
        if clash:
            raise GraphError(f"duplicate parameter names {sorted(clash)}")
        arrays = self.unflatten()
        arrays.update(other.unflatten())
        return ParamVector.from_arrays(arrays)

    def replace(self, other: "ParamVector") -> "ParamVector":
        """Copy of ``self`` with every entry of ``other`` overwritten."""
        arrays = self.unflatten()
        for n in other.names:
            if n not in arrays or arrays[n].shape != other[n].shape:
                raise GraphError(f"cannot replace {n!r}: not in layout or shape differs")
            arrays[n] = other[n]
        return ParamVector.from_arrays(arrays)


# -- functional entry points ----------------------------------------------


def _feed(params: ParamVector, inputs: Optional[Mapping[str, ArrayLike]]) -> Dict[str, np.ndarray]:
    feed: Dict[str, np.ndarray] = dict(inputs or {})
    feed.update(params.unflatten())
    return feed


def _wrt(graph: Graph, params: ParamVector) -> Tuple[List[str], List[Var]]:
    names = [n for n in params.names if n in graph.leaves]
    for n in names:
        node = graph.nodes[graph.leaves[n]]
        if node.op != "param":
            raise GraphError(f"node {node.id}: {n!r} is an input, not a parameter")
    return names, [graph.var(graph.leaves[n]) for n in names]


def _assemble(params: ParamVector, names: List[str], arrays: List[np.ndarray]) -> ParamVector:
    out = np.zeros_like(params.values)
    by_name = dict(zip(names, arrays))
    for n, shape, offset in params.layout:
        if n in by_name:
            size = int(np.prod(shape, dtype=np.int64))
            out[offset : offset + size] = np.asarray(by_name[n]).reshape(-1)
    return ParamVector(out, params.layout)


def _check_scalar(value: np.ndarray, output: Var) -> None:
    if value.ndim != 0:
        raise GraphError(f"node {output.id}: output must be scalar, got shape {value.shape}")


def evaluate(
    graph: Graph,
    output: Union[Var, Sequence[Var]],
    params: ParamVector,
    inputs: Optional[Mapping[str, ArrayLike]] = None,
):
    """Forward values of one node or a list of nodes."""
    if isinstance(output, Var):
        return graph.run([output], _feed(params, inputs))[0]
    return graph.run(list(output), _feed(params, inputs))


def value_and_gradient(
    graph: Graph,
    output: Var,
    params: ParamVector,
    inputs: Optional[Mapping[str, ArrayLike]] = None,
) -> Tuple[float, ParamVector]:
    names, wrt = _wrt(graph, params)
    grads = graph.grad(output, wrt)
    vals = graph.run([output] + grads, _feed(params, inputs))
    _check_scalar(vals[0], output)
    return float(vals[0]), _assemble(params, names, vals[1:])


def gradient(
    graph: Graph,
    output: Var,
    params: ParamVector,
    inputs: Optional[Mapping[str, ArrayLike]] = None,
) -> ParamVector:
    """d output / d params, laid out like ``params``; zero for unused entries."""
    return value_and_gradient(graph, output, params, inputs)[1]


def hessian_vector_product(
    graph: Graph,
    output: Var,
    params: ParamVector,
    v: ParamVector,
    inputs: Optional[Mapping[str, ArrayLike]] = None,
) -> ParamVector:
    """H v with H the Hessian of a scalar ``output``, via grad(grad(f) . v)."""
    params.check_layout(v)
    names, _ = _wrt(graph, params)
    hv_nodes = graph.hvp_nodes(output, names)
    feed = _feed(params, inputs)
    for n in names:
        feed[HVP_PREFIX + n] = v[n]
    vals = graph.run([output] + hv_nodes, feed)
    _check_scalar(vals[0], output)
    return _assemble(params, names, vals[1:])
