"""Search-space dialects and their lowering into primitive-operator graphs.

Three cell dialects are supported, mirroring the common NAS benchmarks:

* ``nb101``: operators live on the vertices of a DAG of at most 7 vertices
  and 9 edges (``NB101Cell``).
* ``nb201``: operators live on the 6 edges of a fixed 4-node DAG (``NB201Cell``).
* ``nb301``: DARTS-style normal cell with 4 intermediate nodes, each taking two
  (input, op) pairs (``NB301Cell``).

Lowering expands each grouped operator label into its primitive sequence,
drops zeroized connections, joins multi-input vertices with ``Add`` and wraps
the cells in a small macro skeleton (stem, stages, reductions, classifier).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .graph import (CGNode, ComputationGraph, GraphBuilder, OpKind, PrimitiveOp,
                    Shape, ensure_valid)


class Dialect(str, Enum):
    NB101 = "nb101"
    NB201 = "nb201"
    NB301 = "nb301"


class DegenerateCellError(ValueError):
    """The cell has no live path from its input to its output."""


class CellSpecError(ValueError):
    """A cell description breaks its dialect's constraints."""


ZERO, SKIP = "zeroize", "skip"

# label -> primitive kinds in order; () means no nodes
GROUPINGS: dict[Dialect, dict[str, tuple[str, ...]]] = {
    Dialect.NB101: {
        "conv1x1": ("Conv2D", "BatchNorm", "ReLU"),
        "conv3x3": ("Conv2D", "BatchNorm", "ReLU"),
        "maxpool3x3": ("MaxPool",),
    },
    Dialect.NB201: {
        ZERO: (),
        SKIP: (),
        "conv1x1": ("ReLU", "Conv2D", "BatchNorm"),
        "conv3x3": ("ReLU", "Conv2D", "BatchNorm"),
        "avgpool3x3": ("AvgPool",),
    },
    Dialect.NB301: {
        ZERO: (),
        SKIP: (),
        "sep3x3": ("ReLU", "Conv2D", "Conv2D", "BatchNorm") * 2,
        "sep5x5": ("ReLU", "Conv2D", "Conv2D", "BatchNorm") * 2,
        "dil3x3": ("ReLU", "Conv2D", "Conv2D", "BatchNorm"),
        "dil5x5": ("ReLU", "Conv2D", "Conv2D", "BatchNorm"),
        "avgpool3x3": ("AvgPool",),
        "maxpool3x3": ("MaxPool",),
    },
}

VOCABULARY: dict[Dialect, tuple[str, ...]] = {d: tuple(t) for d, t in GROUPINGS.items()}
NB201_REDUCED = ("skip", "conv1x1", "conv3x3", "avgpool3x3")

NB101_MAX_VERTICES = 7
NB101_MAX_EDGES = 9
NB201_EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NB301_NODES = 4


# ------------------------------------------------------------ primitive nodes

def _conv(cin: int, cout: int, k: int, hw: tuple[int, int], groups: int = 1,
          dilation: int = 1, stride: int = 1, bias: bool = False):
    h, w = hw
    ho, wo = -(-h // stride), -(-w // stride)
    op = PrimitiveOp.make(OpKind.CONV2D, kernel_h=k, kernel_w=k, stride=stride, groups=groups,
                          dilation=dilation, has_bias=int(bias))
    return op, (h, w, cin), (ho, wo, cout), (k, k, cin // groups, cout)


def _bn(shape: Shape):
    return PrimitiveOp.make(OpKind.BATCHNORM), shape, shape, (1, 1, 1, shape[2])


def _plain(kind: OpKind, shape: Shape):
    return PrimitiveOp.make(kind), shape, shape, None


def _pool(kind: OpKind, shape: Shape, k: int = 3, stride: int = 1):
    h, w, c = shape
    out = (-(-h // stride), -(-w // stride), c)
    return PrimitiveOp.make(kind, kernel_h=k, kernel_w=k, stride=stride), shape, out, None


def _chain(dialect: Dialect, label: str, in_shape: Shape, out_channels: int) -> list[tuple]:
    if label not in GROUPINGS[dialect]:
        raise CellSpecError(f"unknown operator {label!r} for dialect {dialect.value}")
    if label == ZERO:
        raise CellSpecError("zeroize has no expansion; lower_cell drops the connection")
    h, w, cin = in_shape
    c = out_channels
    hw = (h, w)
    if label == SKIP:
        return []
    if dialect == Dialect.NB101:
        if label == "maxpool3x3":
            return [_pool(OpKind.MAXPOOL, in_shape)]
        k = 1 if label == "conv1x1" else 3
        return [_conv(cin, c, k, hw), _bn((h, w, c)), _plain(OpKind.RELU, (h, w, c))]
    if dialect == Dialect.NB201:
        if label == "avgpool3x3":
            return [_pool(OpKind.AVGPOOL, in_shape)]
        k = 1 if label == "conv1x1" else 3
        return [_plain(OpKind.RELU, in_shape), _conv(cin, c, k, hw), _bn((h, w, c))]
    if label in ("avgpool3x3", "maxpool3x3"):
        return [_pool(OpKind.AVGPOOL if label == "avgpool3x3" else OpKind.MAXPOOL, in_shape)]
    k = 3 if label.endswith("3x3") else 5
    if label.startswith("sep"):
        return [
            _plain(OpKind.RELU, in_shape),
            _conv(cin, cin, k, hw, groups=cin),
            _conv(cin, c, 1, hw),
            _bn((h, w, c)),
            _plain(OpKind.RELU, (h, w, c)),
            _conv(c, c, k, hw, groups=c),
            _conv(c, c, 1, hw),
            _bn((h, w, c)),
        ]
    return [
        _plain(OpKind.RELU, in_shape),
        _conv(cin, cin, k, hw, groups=cin, dilation=2),
        _conv(cin, c, 1, hw),
        _bn((h, w, c)),
    ]


def expand_operator(dialect: Dialect | str, label: str, in_shape: Shape,
                    out_channels: int) -> tuple[list[CGNode], list[tuple[int, int]]]:
    """Primitive nodes (ids 0..k-1) and chain edges for one grouped operator."""
    chain = _chain(Dialect(dialect), label, tuple(in_shape), out_channels)
    nodes = [CGNode(i, op, ins, outs, ws) for i, (op, ins, outs, ws) in enumerate(chain)]
    return nodes, [(i, i + 1) for i in range(len(nodes) - 1)]


def _emit_chain(b: GraphBuilder, dialect: Dialect, label: str, src: int, channels: int) -> int:
    cur = src
    for op, ins, outs, ws in _chain(dialect, label, b.shape(src), channels):
        cur = b.add(op, ins, outs, ws, inputs=[cur])
    return cur


# ----------------------------------------------------------------- cell specs

@dataclass(frozen=True)
class NB101Cell:
    """Vertex-labelled DAG; ``matrix`` is upper triangular, ops[0]/ops[-1] are input/output."""
    matrix: tuple[tuple[int, ...], ...]
    ops: tuple[str, ...]
    dialect = Dialect.NB101

    def __post_init__(self):
        object.__setattr__(self, "matrix", tuple(tuple(int(x) for x in row) for row in self.matrix))
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def num_vertices(self) -> int:
        return len(self.ops)

    @property
    def num_edges(self) -> int:
        return int(sum(map(sum, self.matrix)))

    def operators(self) -> list[str]:
        return list(self.ops[1:-1])

    def with_operator(self, pos: int, label: str) -> "NB101Cell":
        ops = list(self.ops)
        ops[pos + 1] = label
        return NB101Cell(self.matrix, tuple(ops))

    def to_text(self) -> str:
        rows = ",".join("".join(str(x) for x in row) for row in self.matrix)
        return f"{rows}|{','.join(self.ops)}"


@dataclass(frozen=True)
class NB201Cell:
    """Six edge labels in the order (1<-0), (2<-0), (2<-1), (3<-0), (3<-1), (3<-2)."""
    edges: tuple[str, ...]
    dialect = Dialect.NB201

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))

    def operators(self) -> list[str]:
        return list(self.edges)

    def with_operator(self, pos: int, label: str) -> "NB201Cell":
        edges = list(self.edges)
        edges[pos] = label
        return NB201Cell(tuple(edges))

    def to_text(self) -> str:
        e = self.edges
        return f"|{e[0]}~0|+|{e[1]}~0|{e[2]}~1|+|{e[3]}~0|{e[4]}~1|{e[5]}~2|"


@dataclass(frozen=True)
class NB301Cell:
    """DARTS normal cell: per intermediate node ``(in_a, in_b, op_a, op_b)``.

    Indices 0 and 1 are the two cell inputs, intermediate node ``j`` (0-based)
    has index ``j + 2`` and may only read indices below that.
    """
    nodes: tuple[tuple[int, int, str, str], ...]
    dialect = Dialect.NB301

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(
            (int(a), int(b), str(x), str(y)) for a, b, x, y in self.nodes))

    def operators(self) -> list[str]:
        return [op for node in self.nodes for op in node[2:]]

    def with_operator(self, pos: int, label: str) -> "NB301Cell":
        nodes = [list(n) for n in self.nodes]
        nodes[pos // 2][2 + pos % 2] = label
        return NB301Cell(tuple(tuple(n) for n in nodes))

    def to_text(self) -> str:
        return json.dumps([list(n) for n in self.nodes], separators=(",", ":"))


CellSpec = Union[NB101Cell, NB201Cell, NB301Cell]


def parse_cell(dialect: Dialect | str, text: str) -> CellSpec:
    dialect = Dialect(dialect)
    text = text.strip()
    try:
        if dialect == Dialect.NB101:
            rows, ops = text.split("|")
            matrix = tuple(tuple(int(ch) for ch in row) for row in rows.split(","))
            spec: CellSpec = NB101Cell(matrix, tuple(ops.split(",")))
        elif dialect == Dialect.NB201:
            parts = [p for p in text.replace("+", "").split("|") if p]
            spec = NB201Cell(tuple(p.split("~")[0] for p in parts))
        else:
            spec = NB301Cell(tuple(tuple(n) for n in json.loads(text)))
    except (ValueError, TypeError) as exc:
        raise CellSpecError(f"cannot parse {dialect.value} cell {text!r}: {exc}") from None
    check_cell(spec)
    return spec


def check_cell(spec: CellSpec) -> None:
    """Raise :class:`CellSpecError` unless the cell satisfies its dialect constraints."""
    vocab = VOCABULARY[spec.dialect]
    if isinstance(spec, NB201Cell):
        if len(spec.edges) != 6:
            raise CellSpecError(f"nb201 cell needs 6 edge labels, got {len(spec.edges)}")
        bad = [e for e in spec.edges if e not in vocab]
        if bad:
            raise CellSpecError(f"unknown nb201 labels {bad}")
        return
    if isinstance(spec, NB301Cell):
        if len(spec.nodes) != NB301_NODES:
            raise CellSpecError(f"nb301 cell needs {NB301_NODES} nodes, got {len(spec.nodes)}")
        for j, (a, b, x, y) in enumerate(spec.nodes):
            idx = j + 2
            if not (0 <= a < idx and 0 <= b < idx) or a == b:
                raise CellSpecError(f"nb301 node {idx} has invalid inputs ({a}, {b})")
            if x not in vocab or y not in vocab:
                raise CellSpecError(f"nb301 node {idx} has unknown labels ({x}, {y})")
        return
    n = len(spec.ops)
    m = np.array(spec.matrix, dtype=int)
    if m.shape != (n, n):
        raise CellSpecError(f"nb101 matrix shape {m.shape} does not match {n} ops")
    if n < 2 or n > NB101_MAX_VERTICES:
        raise CellSpecError(f"nb101 cell has {n} vertices (allowed 2..{NB101_MAX_VERTICES})")
    if np.any(np.tril(m) != 0) or not np.isin(m, (0, 1)).all():
        raise CellSpecError("nb101 matrix must be a strictly upper-triangular 0/1 matrix")
    if int(m.sum()) > NB101_MAX_EDGES:
        raise CellSpecError(f"nb101 cell has {int(m.sum())} edges (max {NB101_MAX_EDGES})")
    if spec.ops[0] != "input" or spec.ops[-1] != "output":
        raise CellSpecError("nb101 ops must start with 'input' and end with 'output'")
    bad = [o for o in spec.ops[1:-1] if o not in vocab]
    if bad:
        raise CellSpecError(f"unknown nb101 labels {bad}")
    if not _nb101_live(m)[-1]:
        raise CellSpecError("nb101 output is unreachable from input")


def _nb101_live(m: np.ndarray) -> np.ndarray:
    n = len(m)
    fwd = np.zeros(n, bool)
    fwd[0] = True
    for v in range(1, n):
        fwd[v] = bool(np.any(m[:v, v].astype(bool) & fwd[:v]))
    bwd = np.zeros(n, bool)
    bwd[-1] = True
    for v in range(n - 2, -1, -1):
        bwd[v] = bool(np.any(m[v, v + 1:].astype(bool) & bwd[v + 1:]))
    return fwd & bwd


def prune_nb101(matrix, ops) -> NB101Cell:
    """Drop vertices that are not on an input->output path (as the benchmark does)."""
    m = np.array(matrix, dtype=int)
    live = _nb101_live(m)
    if not live[-1]:
        raise DegenerateCellError("nb101 output is unreachable from input")
    keep = np.flatnonzero(live)
    sub = m[np.ix_(keep, keep)]
    return NB101Cell(tuple(map(tuple, sub.tolist())), tuple(ops[i] for i in keep))


def is_valid(spec: CellSpec) -> bool:
    """Dialect constraints hold and the cell lowers to a non-degenerate fragment."""
    try:
        check_cell(spec)
        _live_edges(spec)
    except (CellSpecError, DegenerateCellError):
        return False
    return True


# --------------------------------------------------------------- cell lowering

@dataclass(frozen=True)
class Fragment:
    """Lowered cell.  ``entry`` is the external source node (id 0, an Input
    placeholder not included in ``nodes``); ``plumbing`` marks join and
    projection nodes that are not part of any grouped operator."""
    entry: int
    exit: int
    nodes: tuple[CGNode, ...]
    edges: tuple[tuple[int, int], ...]
    plumbing: frozenset[int] = field(default_factory=frozenset)

    @property
    def grouped_nodes(self) -> list[CGNode]:
        return [n for n in self.nodes if n.id not in self.plumbing]


def _edge_dag_live(n: int, edges: Sequence[tuple[int, int, str]], sources: Sequence[int],
                   sinks: Sequence[int]) -> list[tuple[int, int, str]]:
    """Non-zero edges lying on some source->sink path (vertices in topological index order)."""
    nz = [(i, j, op) for i, j, op in edges if op != ZERO]
    fwd = set(sources)
    for v in range(n):
        if any(j == v and i in fwd for i, j, _ in nz):
            fwd.add(v)
    bwd = set(sinks)
    for v in range(n - 1, -1, -1):
        if any(i == v and j in bwd for i, j, _ in nz):
            bwd.add(v)
    return [(i, j, op) for i, j, op in nz if i in fwd and j in bwd]


def _live_edges(spec: CellSpec):
    if isinstance(spec, NB201Cell):
        edges = [(i, j, op) for (i, j), op in zip(NB201_EDGES, spec.edges)]
        live = _edge_dag_live(4, edges, [0], [3])
        if not any(j == 3 for _, j, _ in live):
            raise DegenerateCellError(f"nb201 cell {spec.to_text()} has no live input->output path")
        return live
    if isinstance(spec, NB301Cell):
        edges = [(src, j + 2, op) for j, (a, b, x, y) in enumerate(spec.nodes)
                 for src, op in ((a, x), (b, y))]
        # every intermediate node feeds the cell output; model that as node 6
        n_out = NB301_NODES + 2
        edges += [(j + 2, n_out, SKIP) for j in range(NB301_NODES)]
        live = _edge_dag_live(n_out + 1, edges, [0, 1], [n_out])
        if not any(j == n_out for _, j, _ in live):
            raise DegenerateCellError(f"nb301 cell {spec.to_text()} has no live intermediate node")
        return live
    m = np.array(spec.matrix)
    if not _nb101_live(m)[-1]:
        raise DegenerateCellError("nb101 output is unreachable from input")
    return None


def _emit_cell(b: GraphBuilder, spec: CellSpec, entry: int, channels: int,
               plumbing: set[int]) -> int:
    """Lower ``spec`` reading from node ``entry``; return the exit node id."""
    c = channels
    dialect = spec.dialect

    def join(srcs: list[int]) -> int:
        if len(srcs) == 1:
            return srcs[0]
        shape = b.shape(srcs[0])
        nid = b.add(PrimitiveOp.make(OpKind.ADD), shape, shape, inputs=srcs)
        plumbing.add(nid)
        return nid

    def concat_project(srcs: list[int]) -> int:
        if len(srcs) == 1:
            return srcs[0]
        h, w, _ = b.shape(srcs[0])
        total = sum(b.shape(s)[2] for s in srcs)
        cat = b.add(PrimitiveOp.make(OpKind.CONCAT), (h, w, total), (h, w, total), inputs=srcs)
        op, ins, outs, ws = _conv(total, c, 1, (h, w))
        proj = b.add(op, ins, outs, ws, inputs=[cat])
        plumbing.update((cat, proj))
        return proj

    if isinstance(spec, NB201Cell):
        live = _live_edges(spec)
        val = {0: entry}
        for j in (1, 2, 3):
            branches = [_emit_chain(b, dialect, op, val[i], c) for i, jj, op in live if jj == j]
            if branches:
                val[j] = join(branches)
        return val[3]

    if isinstance(spec, NB301Cell):
        live = _live_edges(spec)
        n_out = NB301_NODES + 2
        val: dict[int, int] = {}
        for k in (0, 1):
            if any(i == k for i, _, _ in live):
                cur = entry
                h, w, cin = b.shape(entry)
                for op, ins, outs, ws in (_plain(OpKind.RELU, (h, w, cin)),
                                          _conv(cin, c, 1, (h, w)), _bn((h, w, c))):
                    cur = b.add(op, ins, outs, ws, inputs=[cur])
                    plumbing.add(cur)
                val[k] = cur
        for j in range(2, n_out):
            branches = [_emit_chain(b, dialect, op, val[i], c) for i, jj, op in live if jj == j]
            if branches:
                val[j] = join(branches)
        return concat_project([val[i] for i, jj, _ in live if jj == n_out])

    m = np.array(spec.matrix)
    n = len(spec.ops)
    live = _nb101_live(m)
    val = {0: entry}
    for v in range(1, n - 1):
        if not live[v]:
            continue
        srcs = [val[u] for u in range(v) if m[u, v] and live[u]]
        val[v] = _emit_chain(b, dialect, spec.ops[v], join(srcs), c)
    return concat_project([val[u] for u in range(n - 1) if m[u, n - 1] and live[u]])


def lower_cell(spec: CellSpec, in_shape: Shape, channels: int) -> Fragment:
    """Lower a single cell reading from a placeholder entry node of ``in_shape``."""
    check_cell(spec)
    b = GraphBuilder()
    entry = b.add(PrimitiveOp.make(OpKind.INPUT), in_shape, in_shape)
    plumbing: set[int] = set()
    exit_id = _emit_cell(b, spec, entry, channels, plumbing)
    g = b.build()
    return Fragment(entry, exit_id, g.nodes[1:], g.edges, frozenset(plumbing))


# --------------------------------------------------------------- macro skeleton

@dataclass(frozen=True)
class MacroConfig:
    input_shape: Shape = (32, 32, 3)
    stem_channels: int = 16
    stages: int = 3
    cells_per_stage: int = 1
    num_classes: int = 10
    head: bool = True

    def __post_init__(self):
        if min(self.stem_channels, self.stages, self.cells_per_stage, self.num_classes) < 1:
            raise ValueError("macro counts must all be >= 1")
        if min(self.input_shape) < 1:
            raise ValueError("input shape must be positive")

    @property
    def num_cells(self) -> int:
        return self.stages * self.cells_per_stage


DEFAULT_MACRO = MacroConfig()


def build_network(spec: CellSpec | Sequence[CellSpec], macro: MacroConfig = DEFAULT_MACRO,
                  family: Optional[str] = None) -> ComputationGraph:
    """Input -> stem -> stages of cells with reductions -> GAP -> Linear -> Output."""
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * macro.num_cells
    if len(specs) != macro.num_cells:
        raise ValueError(f"expected {macro.num_cells} cell specs, got {len(specs)}")
    for s in specs:
        check_cell(s)
    b = GraphBuilder()
    shape = tuple(macro.input_shape)
    cur = b.add(PrimitiveOp.make(OpKind.INPUT), shape, shape)
    c = macro.stem_channels
    h, w, cin = shape
    for op, ins, outs, ws in (_conv(cin, c, 3, (h, w)), _bn((h, w, c)), _plain(OpKind.RELU, (h, w, c))):
        cur = b.add(op, ins, outs, ws, inputs=[cur])
    cells = iter(specs)
    for stage in range(macro.stages):
        if stage > 0:
            op, ins, outs, ws = _pool(OpKind.MAXPOOL, b.shape(cur), k=2, stride=2)
            cur = b.add(op, ins, outs, ws, inputs=[cur])
            h, w, _ = b.shape(cur)
            op, ins, outs, ws = _conv(c, 2 * c, 1, (h, w))
            cur = b.add(op, ins, outs, ws, inputs=[cur])
            c *= 2
        for _ in range(macro.cells_per_stage):
            cur = _emit_cell(b, next(cells), cur, c, set())
    if macro.head:
        h, w, _ = b.shape(cur)
        cur = b.add(PrimitiveOp.make(OpKind.GLOBALAVGPOOL), (h, w, c), (1, 1, c), inputs=[cur])
        k = macro.num_classes
        cur = b.add(PrimitiveOp.make(OpKind.LINEAR, has_bias=1), (1, 1, c), (1, 1, k),
                    (1, 1, c, k), inputs=[cur])
    out = b.shape(cur)
    b.add(PrimitiveOp.make(OpKind.OUTPUT), out, out, inputs=[cur])
    family = family if family is not None else specs[0].dialect.value
    return ensure_valid(b.build(family))


def lower(spec: CellSpec, macro: MacroConfig = DEFAULT_MACRO) -> ComputationGraph:
    return build_network(spec, macro)


# ------------------------------------------------------------------- sampling

def random_cell(dialect: Dialect | str, rng: np.random.Generator,
                labels: Optional[Sequence[str]] = None) -> CellSpec:
    """Uniform sample from the dialect's valid (lowerable) cells.

    ``labels`` restricts the operator vocabulary, e.g. :data:`NB201_REDUCED`.
    """
    dialect = Dialect(dialect)
    vocab = list(labels) if labels is not None else list(VOCABULARY[dialect])
    while True:
        if dialect == Dialect.NB201:
            spec: CellSpec = NB201Cell(tuple(vocab[i] for i in rng.integers(len(vocab), size=6)))
        elif dialect == Dialect.NB301:
            nodes = []
            for j in range(NB301_NODES):
                a, b = rng.choice(j + 2, size=2, replace=False)
                x, y = rng.integers(len(vocab), size=2)
                nodes.append((int(a), int(b), vocab[x], vocab[y]))
            spec = NB301Cell(tuple(nodes))
        else:
            n = NB101_MAX_VERTICES
            m = np.triu(rng.integers(0, 2, size=(n, n)), 1)
            ops = ["input"] + [vocab[i] for i in rng.integers(len(vocab), size=n - 2)] + ["output"]
            if not _nb101_live(m)[-1]:
                continue
            spec = prune_nb101(m, ops)
            if spec.num_edges > NB101_MAX_EDGES:
                continue
        if is_valid(spec):
            return spec


def enumerate_nb201(labels: Sequence[str] = NB201_REDUCED) -> list[NB201Cell]:
    """Every lowerable NB201 cell over ``labels`` (4096 for the reduced vocabulary)."""
    cells = [NB201Cell(combo) for combo in itertools.product(labels, repeat=6)]
    return [c for c in cells if is_valid(c)]
