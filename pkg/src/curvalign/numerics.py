"""Dense float64 tensors and a minimal reverse-mode differentiation engine.

The engine records an append-only tape of primitive operations.  Forward
values are computed eagerly and cached on the tape, so a freshly built node
can be inspected immediately (the trainer relies on this to pick nearest
neighbors from current embeddings before extending the graph with the
curvature terms).  ``reverse_grad`` walks the tape backwards once and
accumulates adjoints in a fixed order, which makes repeated runs
bit-identical.

Only the primitives below exist; there is no general broadcasting.  Shapes
are scalars ``()``, vectors ``(n,)`` and matrices ``(m, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteError, NotScalarOutputError, ShapeMismatchError

Array = np.ndarray


def _as_f64(x) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _require_finite(arr: Array, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {context}")


def _require_2d(arr: Array, op: str) -> None:
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{op}: expected a matrix, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# primitive forward rules
# ---------------------------------------------------------------------------

def _fwd_matmul(a, b):
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}")


def _fwd_add(a, b):
    _same_shape(a, b, "add")
    return a + b


def _fwd_sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def _fwd_mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def _fwd_div(a, b):
    _same_shape(a, b, "div")
    return a / b


def _fwd_smul(a, *, c):
    return a * np.float64(c)


def _fwd_relu(a):
    return np.maximum(a, 0.0)


def _fwd_sum(a):
    return np.asarray(np.sum(a), dtype=np.float64)


def _fwd_mean_rows(a):
    _require_2d(a, "mean_rows")
    return np.mean(a, axis=0)


def _fwd_std_rows(a):
    # population convention: divide by the number of rows, not rows - 1
    _require_2d(a, "std_rows")
    mu = np.mean(a, axis=0)
    return np.sqrt(np.mean((a - mu) ** 2, axis=0))


def _fwd_sqrt(a):
    return np.sqrt(a)


def _fwd_square(a):
    return a * a


def _fwd_exp(a):
    return np.exp(a)


def _fwd_transpose(a):
    _require_2d(a, "transpose")
    return np.ascontiguousarray(a.T)


def _fwd_gather_rows(a, *, rows):
    _require_2d(a, "gather_rows")
    idx = np.asarray(rows, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"gather_rows: index array must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatchError(
            f"gather_rows: index out of range for {a.shape[0]} rows"
        )
    return a[idx]


def _fwd_broadcast_row(a, *, count):
    if a.ndim != 1:
        raise ShapeMismatchError(f"broadcast_row: expected a vector, got {a.shape}")
    if count < 1:
        raise ShapeMismatchError("broadcast_row: count must be >= 1")
    return np.tile(a, (count, 1))


# ---------------------------------------------------------------------------
# primitive backward rules
# ---------------------------------------------------------------------------
# each rule maps (input values, cached output, upstream adjoint, aux)
# to one adjoint per input

def _bwd_matmul(ins, out, g, aux):
    a, b = ins
    return [g @ b.T, a.T @ g]


def _bwd_add(ins, out, g, aux):
    return [g, g]


def _bwd_sub(ins, out, g, aux):
    return [g, -g]


def _bwd_mul(ins, out, g, aux):
    a, b = ins
    return [g * b, g * a]


def _bwd_div(ins, out, g, aux):
    a, b = ins
    return [g / b, -g * a / (b * b)]


def _bwd_smul(ins, out, g, aux):
    return [g * np.float64(aux["c"])]


def _bwd_relu(ins, out, g, aux):
    # derivative at exactly 0 is defined as 0
    return [g * (ins[0] > 0.0)]


def _bwd_sum(ins, out, g, aux):
    return [np.full_like(ins[0], float(g))]


def _bwd_mean_rows(ins, out, g, aux):
    a = ins[0]
    return [np.tile(g / a.shape[0], (a.shape[0], 1))]


def _bwd_std_rows(ins, out, g, aux):
    a = ins[0]
    b = a.shape[0]
    centered = a - np.mean(a, axis=0)
    sigma = out
    scale = np.where(sigma > 0.0, g / (b * np.where(sigma > 0.0, sigma, 1.0)), 0.0)
    return [centered * scale]


def _bwd_sqrt(ins, out, g, aux):
    return [g / (2.0 * out)]


def _bwd_square(ins, out, g, aux):
    return [2.0 * ins[0] * g]


def _bwd_exp(ins, out, g, aux):
    return [g * out]


def _bwd_transpose(ins, out, g, aux):
    return [np.ascontiguousarray(g.T)]


def _bwd_gather_rows(ins, out, g, aux):
    a = ins[0]
    adj = np.zeros_like(a)
    np.add.at(adj, np.asarray(aux["rows"], dtype=np.int64), g)
    return [adj]


def _bwd_broadcast_row(ins, out, g, aux):
    return [np.sum(g, axis=0)]


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "div": _fwd_div,
    "smul": _fwd_smul,
    "relu": _fwd_relu,
    "sum": _fwd_sum,
    "mean_rows": _fwd_mean_rows,
    "std_rows": _fwd_std_rows,
    "sqrt": _fwd_sqrt,
    "square": _fwd_square,
    "exp": _fwd_exp,
    "transpose": _fwd_transpose,
    "gather_rows": _fwd_gather_rows,
    "broadcast_row": _fwd_broadcast_row,
}

_BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "smul": _bwd_smul,
    "relu": _bwd_relu,
    "sum": _bwd_sum,
    "mean_rows": _bwd_mean_rows,
    "std_rows": _bwd_std_rows,
    "sqrt": _bwd_sqrt,
    "square": _bwd_square,
    "exp": _bwd_exp,
    "transpose": _bwd_transpose,
    "gather_rows": _bwd_gather_rows,
    "broadcast_row": _bwd_broadcast_row,
}

PRIMITIVES = tuple(sorted(_FORWARD))


def eval_primitive(kind: str, inputs: list[Array], **aux) -> Array:
    """Evaluate one primitive on concrete arrays.

    Pure: inputs are never mutated.  Raises ShapeMismatchError for
    incompatible extents and NonFiniteError if the result contains NaN/Inf.
    """
    if kind not in _FORWARD:
        raise KeyError(f"unknown primitive {kind!r}")
    vals = [_as_f64(x) for x in inputs]
    with np.errstate(all="ignore"):  # finiteness is checked explicitly below
        out = _FORWARD[kind](*vals, **aux)
    out = np.asarray(out, dtype=np.float64)
    _require_finite(out, f"primitive {kind!r}")
    return out


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str                      # "leaf" or a primitive kind
    inputs: tuple[int, ...]
    aux: dict
    value: Array                 # cached forward value
    param: bool = False
    name: Optional[str] = None


class Var:
    """Handle to one node of a Graph, with operator sugar."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.graph.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise ValueError("cannot combine Vars from different graphs")
            return other
        return self.graph.leaf(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.graph.apply("add", self, self._coerce(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._coerce(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.graph.apply("mul", self, other)
        return self.graph.apply("smul", self, c=float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.graph.apply("div", self, other)
        return self.graph.apply("smul", self, c=1.0 / float(other))

    def __neg__(self):
        return self.graph.apply("smul", self, c=-1.0)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._coerce(other))

    def relu(self):
        return self.graph.apply("relu", self)

    def sqrt(self):
        return self.graph.apply("sqrt", self)

    def square(self):
        return self.graph.apply("square", self)

    def exp(self):
        return self.graph.apply("exp", self)

    def sum(self):
        return self.graph.apply("sum", self)

    def mean_rows(self):
        return self.graph.apply("mean_rows", self)

    def std_rows(self):
        return self.graph.apply("std_rows", self)

    @property
    def T(self):
        return self.graph.apply("transpose", self)

    def gather_rows(self, rows):
        return self.graph.apply("gather_rows", self, rows=np.asarray(rows, dtype=np.int64))

    def broadcast_row(self, count: int):
        return self.graph.apply("broadcast_row", self, count=int(count))


class Graph:
    """Append-only tape of primitive applications.

    Node order is a topological order by construction; a single Graph must
    not be mutated from multiple threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, *, param: bool = False, name: Optional[str] = None) -> Var:
        arr = _as_f64(value)
        _require_finite(arr, "leaf")
        self.nodes.append(Node("leaf", (), {}, arr, param=param, name=name))
        return Var(self, len(self.nodes) - 1)

    def apply(self, op: str, *args: Var, **aux) -> Var:
        ids = tuple(a.idx for a in args)
        vals = [self.nodes[i].value for i in ids]
        out = eval_primitive(op, vals, **aux)
        self.nodes.append(Node(op, ids, aux, out))
        return Var(self, len(self.nodes) - 1)

    def param_leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.param]

    def forward_values(self, overrides: Optional[dict[int, Array]] = None) -> list[Array]:
        """Re-evaluate the whole tape, optionally overriding leaf values.

        Does not touch the cached values; used by finite differencing and by
        the cache-consistency tests.
        """
        overrides = overrides or {}
        vals: list[Array] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                vals.append(overrides.get(i, node.value))
            else:
                vals.append(eval_primitive(node.op, [vals[j] for j in node.inputs], **node.aux))
        return vals


def _check_scalar(graph: Graph, output: Var) -> None:
    if output.graph is not graph:
        raise ValueError("output Var does not belong to this graph")
    if graph.nodes[output.idx].value.size != 1:
        raise NotScalarOutputError(
            f"reverse_grad needs a scalar output, got shape {graph.nodes[output.idx].value.shape}"
        )


def reverse_grad(graph: Graph, output: Var) -> dict[int, Array]:
    """Gradient of a scalar output with respect to every parameter leaf.

    Returns a map node-id -> adjoint array.  Leaves the output does not
    depend on get explicit zero gradients.  Accumulation order is fixed by
    node index, so repeated calls are bit-identical.
    """
    _check_scalar(graph, output)
    nodes = graph.nodes
    adjoints: dict[int, Array] = {
        output.idx: np.ones_like(nodes[output.idx].value)
    }
    for i in range(output.idx, -1, -1):
        node = nodes[i]
        g = adjoints.get(i)
        if g is None or node.op == "leaf":
            continue
        ins = [nodes[j].value for j in node.inputs]
        contribs = _BACKWARD[node.op](ins, node.value, g, node.aux)
        for j, contrib in zip(node.inputs, contribs):
            if j in adjoints:
                adjoints[j] = adjoints[j] + contrib
            else:
                adjoints[j] = contrib
    result: dict[int, Array] = {}
    for i in graph.param_leaves():
        grad = adjoints.get(i)
        if grad is None:
            grad = np.zeros_like(nodes[i].value)
        _require_finite(grad, f"gradient of leaf {i}")
        result[i] = grad
    return result


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients against central differences."""

    per_leaf: dict = field(default_factory=dict)  # key -> (max_rel, max_abs)
    passed: bool = True
    tol: float = 1e-4
    floor: float = 1e-6

    def worst(self) -> float:
        if not self.per_leaf:
            return 0.0
        return max(rel for rel, _ in self.per_leaf.values())


def finite_diff_check(
    graph: Graph,
    output: Var,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradReport:
    """Compare reverse_grad against central finite differences.

    Every coordinate of every parameter leaf is perturbed by +/- step and
    the scalar output re-evaluated.  A coordinate participates in the
    verdict only when |analytic| + |numeric| > floor; below that both are
    treated as zero.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    _check_scalar(graph, output)
    analytic = reverse_grad(graph, output)
    out_idx = output.idx
    report = GradReport(tol=tol, floor=floor)
    for leaf_idx in graph.param_leaves():
        base = graph.nodes[leaf_idx].value
        numeric = np.zeros_like(base)
        flat = base.ravel()
        num_flat = numeric.ravel()
        for c in range(flat.size):
            bumped = base.copy()
            bumped.ravel()[c] = flat[c] + step
            f_plus = float(graph.forward_values({leaf_idx: bumped})[out_idx])
            bumped.ravel()[c] = flat[c] - step
            f_minus = float(graph.forward_values({leaf_idx: bumped})[out_idx])
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("objective non-finite at a perturbed point")
            num_flat[c] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[leaf_idx].ravel()
        n = num_flat
        scale = np.abs(a) + np.abs(n)
        active = scale > floor
        rel = np.zeros_like(scale)
        rel[active] = np.abs(a - n)[active] / scale[active]
        max_rel = float(rel.max()) if rel.size else 0.0
        max_abs = float(np.abs(a - n).max()) if a.size else 0.0
        key = graph.nodes[leaf_idx].name or leaf_idx
        report.per_leaf[key] = (max_rel, max_abs)
        if max_rel > tol:
            report.passed = False
    return report
