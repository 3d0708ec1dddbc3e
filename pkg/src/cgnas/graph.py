"""Computational graphs of primitive operators.

A :class:`ComputationGraph` is an immutable DAG whose nodes are single
primitive operations (a convolution, a batch norm, an add, ...) annotated
with the tensor shapes flowing in and out of them.  Shapes are ``(H, W, C)``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from hashlib import blake2b
from typing import Iterable, Optional, Sequence

Shape = tuple[int, int, int]

FORMAT_VERSION = "1"


class OpKind(str, Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    CONV2D = "Conv2D"
    BATCHNORM = "BatchNorm"
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    MAXPOOL = "MaxPool"
    AVGPOOL = "AvgPool"
    GLOBALAVGPOOL = "GlobalAvgPool"
    LINEAR = "Linear"
    ADD = "Add"
    CONCAT = "Concat"
    MULTIPLY = "Multiply"
    ZERO = "Zero"


OP_KINDS: tuple[OpKind, ...] = tuple(OpKind)
WEIGHTED_KINDS = frozenset({OpKind.CONV2D, OpKind.LINEAR, OpKind.BATCHNORM})
JOIN_KINDS = frozenset({OpKind.ADD, OpKind.MULTIPLY, OpKind.CONCAT})

ATTRIBUTE_NAMES = ("kernel_h", "kernel_w", "stride", "groups", "dilation", "has_bias")
_ALLOWED_ATTRS = {
    OpKind.CONV2D: frozenset(ATTRIBUTE_NAMES),
    OpKind.MAXPOOL: frozenset({"kernel_h", "kernel_w", "stride"}),
    OpKind.AVGPOOL: frozenset({"kernel_h", "kernel_w", "stride"}),
    OpKind.LINEAR: frozenset({"has_bias"}),
}


class CGFormatError(ValueError):
    """Raised when a serialized graph document cannot be parsed."""


class CGValidationError(ValueError):
    """Raised when a graph violates the structural invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid computation graph: " + "; ".join(self.violations))


@dataclass(frozen=True)
class PrimitiveOp:
    kind: OpKind
    attrs: tuple[tuple[str, int], ...] = ()

    @classmethod
    def make(cls, kind: OpKind | str, **attrs: int) -> "PrimitiveOp":
        return cls(OpKind(kind), tuple(sorted((k, int(v)) for k, v in attrs.items())))

    def attr(self, name: str, default: int = 0) -> int:
        for key, value in self.attrs:
            if key == name:
                return value
        return default

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS


@dataclass(frozen=True)
class CGNode:
    id: int
    op: PrimitiveOp
    in_shape: Shape
    out_shape: Shape
    weight_shape: Optional[tuple[int, int, int, int]] = None

    @property
    def kind(self) -> OpKind:
        return self.op.kind

    def features(self) -> tuple:
        """Label used for hashing: everything about the node except its id."""
        return (self.op.kind.value, self.op.attrs, self.in_shape, self.out_shape, self.weight_shape)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True, eq=True)
class ComputationGraph:
    nodes: tuple[CGNode, ...]
    edges: tuple[tuple[int, int], ...]
    family: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(s), int(d)) for s, d in self.edges))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def predecessors(self) -> list[list[int]]:
        preds: list[list[int]] = [[] for _ in self.nodes]
        for s, d in self.edges:
            preds[d].append(s)
        return preds

    def successors(self) -> list[list[int]]:
        succs: list[list[int]] = [[] for _ in self.nodes]
        for s, d in self.edges:
            succs[s].append(d)
        return succs

    def undirected_edges(self) -> list[tuple[int, int]]:
        """Edges of the simple undirected skeleton, sorted, without loops or duplicates."""
        return sorted({(min(s, d), max(s, d)) for s, d in self.edges if s != d})

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in self.nodes]
        for a, b in self.undirected_edges():
            nbrs[a].append(b)
            nbrs[b].append(a)
        return nbrs

    def topological_depth(self) -> list[int]:
        """Longest-path distance from any source to each node."""
        order = topological_order(len(self.nodes), self.edges)
        if order is None:
            raise CGValidationError(["cycle"])
        preds = self.predecessors()
        depth = [0] * len(self.nodes)
        for v in order:
            if preds[v]:
                depth[v] = 1 + max(depth[p] for p in preds[v])
        return depth

    def relabel(self, perm: Sequence[int]) -> "ComputationGraph":
        """Copy with node ``i`` renamed ``perm[i]``; nodes are stored sorted by new id."""
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(len(self.nodes))):
            raise ValueError("perm must be a permutation of node ids")
        nodes = sorted(
            (CGNode(perm[n.id], n.op, n.in_shape, n.out_shape, n.weight_shape) for n in self.nodes),
            key=lambda n: n.id,
        )
        edges = [(perm[s], perm[d]) for s, d in self.edges]
        return ComputationGraph(tuple(nodes), tuple(edges), self.family)

    def with_family(self, family: Optional[str]) -> "ComputationGraph":
        return ComputationGraph(self.nodes, self.edges, family)


def topological_order(n: int, edges: Iterable[tuple[int, int]]) -> Optional[list[int]]:
    """Kahn's algorithm with smallest-id tie breaking; ``None`` if there is a cycle."""
    import heapq

    indeg = [0] * n
    succs: list[list[int]] = [[] for _ in range(n)]
    for s, d in edges:
        succs[s].append(d)
        indeg[d] += 1
    heap = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in succs[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    return order if len(order) == n else None


class GraphBuilder:
    """Incremental construction; ids are handed out in creation order."""

    def __init__(self):
        self._nodes: list[CGNode] = []
        self._edges: list[tuple[int, int]] = []

    def add(self, op: PrimitiveOp, in_shape: Shape, out_shape: Shape,
            weight_shape: Optional[tuple[int, int, int, int]] = None,
            inputs: Sequence[int] = ()) -> int:
        nid = len(self._nodes)
        self._nodes.append(CGNode(nid, op, tuple(in_shape), tuple(out_shape),
                                  None if weight_shape is None else tuple(weight_shape)))
        for src in inputs:
            self._edges.append((src, nid))
        return nid

    def edge(self, src: int, dst: int) -> None:
        self._edges.append((src, dst))

    def shape(self, nid: int) -> Shape:
        return self._nodes[nid].out_shape

    def build(self, family: Optional[str] = None) -> ComputationGraph:
        return ComputationGraph(tuple(self._nodes), tuple(self._edges), family)


# ---------------------------------------------------------------- validation

def _node_violations(node: CGNode) -> list[str]:
    out = []
    kind = node.op.kind
    for name, shape in (("in_shape", node.in_shape), ("out_shape", node.out_shape)):
        if len(shape) != 3 or any(int(x) < 1 for x in shape):
            out.append(f"node {node.id}: {name} {shape} must be three positive integers")
    if kind == OpKind.ZERO:
        out.append(f"node {node.id}: Zero op may not appear in a lowered graph")
    allowed = _ALLOWED_ATTRS.get(kind, frozenset())
    bad = [k for k, _ in node.op.attrs if k not in allowed]
    if bad:
        out.append(f"node {node.id}: attributes {bad} not meaningful for {kind.value}")
    if node.op.weighted and node.weight_shape is None:
        out.append(f"node {node.id}: weighted op {kind.value} missing weight_shape")
    if not node.op.weighted and node.weight_shape is not None:
        out.append(f"node {node.id}: unweighted op {kind.value} carries weight_shape")
    return out


def _fan_in_violations(node: CGNode, inputs: list[CGNode]) -> list[str]:
    kind = node.op.kind
    srcs = [p.id for p in inputs]
    if kind == OpKind.INPUT:
        return [f"node {node.id}: Input has incoming edges from {srcs}"] if inputs else []
    if not inputs:
        return [f"node {node.id}: no incoming edges"]
    if kind in (OpKind.ADD, OpKind.MULTIPLY):
        bad = [p.id for p in inputs if p.out_shape != node.in_shape]
        if bad:
            return [f"node {node.id}: fan-in shape mismatch from {bad} "
                    f"({[inputs[srcs.index(b)].out_shape for b in bad]} vs {node.in_shape})"]
        return []
    if kind == OpKind.CONCAT:
        hw = {p.out_shape[:2] for p in inputs}
        total = sum(p.out_shape[2] for p in inputs)
        if hw != {node.in_shape[:2]} or total != node.in_shape[2]:
            return [f"node {node.id}: fan-in shape mismatch for Concat from {srcs}"]
        return []
    if len(inputs) != 1:
        return [f"node {node.id}: {kind.value} expects a single input, got {srcs}"]
    if inputs[0].out_shape != node.in_shape:
        return [f"node {node.id}: shape mismatch on edge ({srcs[0]}, {node.id}): "
                f"{inputs[0].out_shape} vs {node.in_shape}"]
    return []


def validate(g: ComputationGraph) -> ValidationReport:
    """Check every structural invariant and report all violations found."""
    v: list[str] = []
    n = len(g.nodes)
    if [node.id for node in g.nodes] != list(range(n)):
        return ValidationReport(False, ["node ids must be dense 0..n-1 in order"])
    for s, d in g.edges:
        if not (0 <= s < n and 0 <= d < n):
            v.append(f"edge ({s}, {d}) references a missing node")
    if v:
        return ValidationReport(False, v)
    for node in g.nodes:
        v.extend(_node_violations(node))

    inputs = [node.id for node in g.nodes if node.op.kind == OpKind.INPUT]
    outputs = [node.id for node in g.nodes if node.op.kind == OpKind.OUTPUT]
    if len(inputs) != 1:
        v.append(f"expected exactly one Input node, found {inputs}")
    if len(outputs) != 1:
        v.append(f"expected exactly one Output node, found {outputs}")
    succs = g.successors()
    for o in outputs:
        if succs[o]:
            v.append(f"node {o}: Output has outgoing edges to {succs[o]}")

    order = topological_order(n, g.edges)
    if order is None:
        cyc = sorted(set(range(n)) - set(_acyclic_part(n, g.edges)))
        v.append(f"cycle through nodes {cyc}")
    else:
        preds = g.predecessors()
        for node in g.nodes:
            v.extend(_fan_in_violations(node, [g.nodes[p] for p in preds[node.id]]))

    if len(inputs) == 1 and len(outputs) == 1:
        fwd = _reach(inputs[0], succs)
        bwd = _reach(outputs[0], g.predecessors())
        off = [i for i in range(n) if i not in fwd or i not in bwd]
        if off:
            v.append(f"nodes {off} are not on an Input->Output path")
    return ValidationReport(not v, v)


def _acyclic_part(n, edges):
    indeg = [0] * n
    succs = [[] for _ in range(n)]
    for s, d in edges:
        succs[s].append(d)
        indeg[d] += 1
    stack = [i for i in range(n) if indeg[i] == 0]
    seen = []
    while stack:
        x = stack.pop()
        seen.append(x)
        for y in succs[x]:
            indeg[y] -= 1
            if indeg[y] == 0:
                stack.append(y)
    return seen


def _reach(start: int, adj: list[list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        x = stack.pop()
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return seen


def ensure_valid(g: ComputationGraph) -> ComputationGraph:
    report = validate(g)
    if not report.ok:
        raise CGValidationError(report.violations)
    return g


# ------------------------------------------------------------------- hashing

def _digest(label: str) -> str:
    return blake2b(label.encode(), digest_size=8).hexdigest()


def wl_hash(g: ComputationGraph, iterations: int = 3) -> int:
    """64-bit Weisfeiler-Lehman digest.

    Refinement runs over the skeleton with neighbours tagged by edge direction
    (in/out), and the final digest hashes the histogram of colours from every
    round.  Equal graphs under relabelling always collide; with
    ``iterations=0`` only the node-feature multiset matters.
    """
    ensure_valid(g)
    preds, succs = g.predecessors(), g.successors()
    colors = [_digest(repr(node.features())) for node in g.nodes]
    hist = Counter(colors)
    for _ in range(iterations):
        colors = [
            _digest(colors[v] + "|<" + ",".join(sorted(colors[u] for u in preds[v]))
                    + "|>" + ",".join(sorted(colors[w] for w in succs[v])))
            for v in range(len(colors))
        ]
        hist.update(colors)
    label = ";".join(f"{c}:{k}" for c, k in sorted(hist.items()))
    return int(blake2b(label.encode(), digest_size=8).hexdigest(), 16)


# ------------------------------------------------------------- serialization

def to_dict(g: ComputationGraph) -> dict:
    return {
        "version": FORMAT_VERSION,
        "family": g.family,
        "nodes": [
            {
                "id": n.id,
                "kind": n.op.kind.value,
                "attributes": dict(n.op.attrs),
                "in_shape": list(n.in_shape),
                "out_shape": list(n.out_shape),
                "weight_shape": None if n.weight_shape is None else list(n.weight_shape),
            }
            for n in g.nodes
        ],
        "edges": [list(e) for e in g.edges],
    }


def serialize(g: ComputationGraph) -> str:
    ensure_valid(g)
    return json.dumps(to_dict(g), sort_keys=True, indent=1) + "\n"


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise CGFormatError(f"{where}: missing field '{key}'")
    return obj[key]


def _int_tuple(value, length: int, where: str) -> tuple:
    if not isinstance(value, list) or len(value) != length or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value):
        raise CGFormatError(f"{where}: expected a list of {length} integers, got {value!r}")
    return tuple(value)


def from_dict(doc: dict) -> ComputationGraph:
    if not isinstance(doc, dict):
        raise CGFormatError("document root must be an object")
    version = _field(doc, "version", "root")
    if version != FORMAT_VERSION:
        raise CGFormatError(f"version: unsupported version {version!r}")
    family = doc.get("family")
    raw_nodes = _field(doc, "nodes", "root")
    raw_edges = _field(doc, "edges", "root")
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise CGFormatError("nodes/edges must be lists")
    nodes = []
    for i, rn in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        kind = _field(rn, "kind", where)
        try:
            kind = OpKind(kind)
        except ValueError:
            raise CGFormatError(f"{where}.kind: unknown op kind {kind!r}") from None
        attrs = rn.get("attributes") or {}
        if not isinstance(attrs, dict) or not all(isinstance(x, int) for x in attrs.values()):
            raise CGFormatError(f"{where}.attributes: expected a map of integers")
        nid = _field(rn, "id", where)
        if not isinstance(nid, int):
            raise CGFormatError(f"{where}.id: expected an integer")
        ws = rn.get("weight_shape")
        nodes.append(CGNode(
            nid,
            PrimitiveOp.make(kind, **attrs),
            _int_tuple(_field(rn, "in_shape", where), 3, f"{where}.in_shape"),
            _int_tuple(_field(rn, "out_shape", where), 3, f"{where}.out_shape"),
            None if ws is None else _int_tuple(ws, 4, f"{where}.weight_shape"),
        ))
    edges = [_int_tuple(e, 2, f"edges[{i}]") for i, e in enumerate(raw_edges)]
    return ComputationGraph(tuple(nodes), tuple(edges), family)


def deserialize(text: str) -> ComputationGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CGFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ensure_valid(from_dict(doc))
