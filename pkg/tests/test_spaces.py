from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from cgnas.graph import OpKind, serialize, validate, wl_hash
from cgnas.spaces import (NB201_REDUCED, VOCABULARY, CellSpecError, DegenerateCellError, Dialect,
                          MacroConfig, NB101Cell, NB201Cell, NB301Cell, build_network, check_cell,
                          enumerate_nb201, expand_operator, is_valid, lower_cell, parse_cell,
                          prune_nb101, random_cell)

# grouped-operator node counts from the operator grouping table
NODE_COUNTS = {
    (Dialect.NB101, "conv1x1"): 3, (Dialect.NB101, "conv3x3"): 3, (Dialect.NB101, "maxpool3x3"): 1,
    (Dialect.NB201, "zeroize"): 0, (Dialect.NB201, "skip"): 0, (Dialect.NB201, "conv1x1"): 3,
    (Dialect.NB201, "conv3x3"): 3, (Dialect.NB201, "avgpool3x3"): 1,
    (Dialect.NB301, "zeroize"): 0, (Dialect.NB301, "skip"): 0, (Dialect.NB301, "sep3x3"): 8,
    (Dialect.NB301, "sep5x5"): 8, (Dialect.NB301, "dil3x3"): 4, (Dialect.NB301, "dil5x5"): 4,
    (Dialect.NB301, "avgpool3x3"): 1, (Dialect.NB301, "maxpool3x3"): 1,
}

ALL_SKIP = "|skip~0|+|skip~0|skip~1|+|skip~0|skip~1|skip~2|"


def kinds(nodes):
    return [n.kind.value for n in nodes]


def test_vocabularies():
    assert set(VOCABULARY[Dialect.NB101]) == {"conv1x1", "conv3x3", "maxpool3x3"}
    assert set(VOCABULARY[Dialect.NB201]) == {"zeroize", "skip", "conv1x1", "conv3x3", "avgpool3x3"}
    assert set(VOCABULARY[Dialect.NB301]) == {"zeroize", "skip", "sep3x3", "sep5x5", "dil3x3",
                                              "dil5x5", "avgpool3x3", "maxpool3x3"}
    assert {(d, op) for d in Dialect for op in VOCABULARY[d]} == set(NODE_COUNTS)


@pytest.mark.parametrize("dialect,label", sorted((d, op) for d, op in NODE_COUNTS if op != "zeroize"))
def test_expand_node_counts(dialect, label):
    nodes, edges = expand_operator(dialect, label, (32, 32, 16), 16)
    assert len(nodes) == NODE_COUNTS[(dialect, label)]
    assert edges == [(i, i + 1) for i in range(len(nodes) - 1)]


@pytest.mark.parametrize("dialect", [Dialect.NB201, Dialect.NB301])
def test_zeroize_has_no_expansion(dialect):
    with pytest.raises(CellSpecError, match="zeroize"):
        expand_operator(dialect, "zeroize", (8, 8, 16), 16)


def test_unknown_label():
    with pytest.raises(CellSpecError, match="unknown operator"):
        expand_operator(Dialect.NB101, "sep3x3", (8, 8, 16), 16)


def test_nb201_conv3x3_sequence():
    nodes, _ = expand_operator(Dialect.NB201, "conv3x3", (32, 32, 16), 16)
    assert kinds(nodes) == ["ReLU", "Conv2D", "BatchNorm"]
    assert nodes[1].op.attr("kernel_h") == nodes[1].op.attr("kernel_w") == 3


def test_nb301_sep5x5_sequence_and_groups():
    nodes, _ = expand_operator(Dialect.NB301, "sep5x5", (32, 32, 16), 24)
    assert kinds(nodes) == ["ReLU", "Conv2D", "Conv2D", "BatchNorm"] * 2
    depthwise, pointwise = nodes[1], nodes[2]
    assert depthwise.op.attr("groups") == depthwise.in_shape[2] == 16
    assert depthwise.op.attr("kernel_h") == 5
    assert pointwise.op.attr("kernel_h") == 1 and pointwise.op.attr("groups") == 1
    assert nodes[5].op.attr("groups") == nodes[5].in_shape[2] == 24
    assert nodes[-1].out_shape == (32, 32, 24)


def test_dil_conv_carries_dilation():
    nodes, _ = expand_operator(Dialect.NB301, "dil3x3", (16, 16, 32), 32)
    assert kinds(nodes) == ["ReLU", "Conv2D", "Conv2D", "BatchNorm"]
    assert nodes[1].op.attr("dilation") == 2
    assert nodes[2].op.attr("kernel_h") == 1 and nodes[2].op.attr("dilation") == 1


def test_nb101_maxpool_single_node():
    nodes, _ = expand_operator(Dialect.NB101, "maxpool3x3", (8, 8, 64), 64)
    assert kinds(nodes) == ["MaxPool"]
    assert nodes[0].in_shape == nodes[0].out_shape == (8, 8, 64)


def test_shape_propagation_in_chains():
    for (dialect, label), count in NODE_COUNTS.items():
        if count == 0:
            continue
        nodes, edges = expand_operator(dialect, label, (16, 16, 8), 32)
        for s, d in edges:
            assert nodes[s].out_shape == nodes[d].in_shape
        conv_outs = [n.out_shape[2] for n in nodes if n.kind == OpKind.CONV2D]
        if conv_outs:
            assert nodes[-1].out_shape == (16, 16, 32)


# ------------------------------------------------------------------ cells

def test_nb201_all_conv3x3_fragment():
    spec = NB201Cell(("conv3x3",) * 6)
    frag = lower_cell(spec, (32, 32, 16), 16)
    assert len(frag.grouped_nodes) == 18
    # node 1 has one incoming edge, nodes 2 and 3 need one Add each
    joins = [n for n in frag.nodes if n.id in frag.plumbing]
    assert kinds(joins) == ["Add", "Add"]


def test_nb201_all_skip_fragment():
    frag = lower_cell(parse_cell("nb201", ALL_SKIP), (8, 8, 16), 16)
    assert frag.grouped_nodes == []
    assert all(n.kind == OpKind.ADD for n in frag.nodes)
    assert frag.exit in frag.plumbing


def test_nb201_all_zeroize_degenerate():
    with pytest.raises(DegenerateCellError, match="no live"):
        lower_cell(NB201Cell(("zeroize",) * 6), (8, 8, 16), 16)


def test_zeroize_drops_connection():
    # only 0->3 survives: a single conv chain from entry to exit
    spec = NB201Cell(("zeroize", "zeroize", "zeroize", "conv1x1", "zeroize", "zeroize"))
    frag = lower_cell(spec, (8, 8, 16), 16)
    assert kinds(frag.nodes) == ["ReLU", "Conv2D", "BatchNorm"]
    assert frag.plumbing == frozenset()


def test_nb101_concat_projection():
    spec = NB101Cell(((0, 1, 1, 0), (0, 0, 0, 1), (0, 0, 0, 1), (0, 0, 0, 0)),
                     ("input", "conv3x3", "maxpool3x3", "output"))
    frag = lower_cell(spec, (8, 8, 16), 16)
    byid = {n.id: n for n in frag.nodes}
    exit_node = byid[frag.exit]
    assert exit_node.kind == OpKind.CONV2D and exit_node.op.attr("kernel_h") == 1
    assert exit_node.out_shape == (8, 8, 16)
    concat = [n for n in frag.nodes if n.kind == OpKind.CONCAT]
    assert len(concat) == 1 and concat[0].in_shape == (8, 8, 32)
    assert len(frag.grouped_nodes) == 4


def test_nb101_multi_input_vertex_uses_add():
    spec = NB101Cell(((0, 1, 1, 0), (0, 0, 1, 0), (0, 0, 0, 1), (0, 0, 0, 0)),
                     ("input", "conv1x1", "conv3x3", "output"))
    frag = lower_cell(spec, (8, 8, 16), 16)
    assert kinds(n for n in frag.nodes if n.id in frag.plumbing) == ["Add"]


def test_nb301_lowering_is_valid_network():
    spec = NB301Cell(((0, 1, "sep3x3", "skip"), (0, 2, "dil5x5", "maxpool3x3"),
                      (1, 3, "zeroize", "avgpool3x3"), (2, 4, "sep5x5", "skip")))
    g = build_network(spec)
    assert validate(g).ok
    counts = Counter(kinds(g.nodes))
    assert counts["Concat"] == 3          # one output concat per cell, three cells


# --------------------------------------------------------------- networks

def test_all_skip_network_weighted_nodes():
    g = build_network(parse_cell("nb201", ALL_SKIP), MacroConfig((32, 32, 3), 16, 3, 1))
    assert validate(g).ok
    weighted = [n for n in g.nodes if n.op.weighted]
    # stem conv + bn, one 1x1 conv per reduction, classifier
    assert kinds(weighted) == ["Conv2D", "BatchNorm", "Conv2D", "Conv2D", "Linear"]
    assert [n.out_shape[2] for n in weighted[2:4]] == [32, 64]
    pools = [n for n in g.nodes if n.kind == OpKind.MAXPOOL]
    assert [p.out_shape[:2] for p in pools] == [(16, 16), (8, 8)]
    assert kinds(g.nodes)[-3:] == ["GlobalAvgPool", "Linear", "Output"]


def test_isomorphic_specs_hash_equal():
    m = ((0, 1, 1, 0), (0, 0, 0, 1), (0, 0, 0, 1), (0, 0, 0, 0))
    a = NB101Cell(m, ("input", "conv3x3", "maxpool3x3", "output"))
    b = NB101Cell(m, ("input", "maxpool3x3", "conv3x3", "output"))
    assert serialize(build_network(a)) != serialize(build_network(b))
    assert wl_hash(build_network(a)) == wl_hash(build_network(b))


@given(st.integers(0, 2 ** 31), st.sampled_from(list(Dialect)))
def test_every_lowered_network_validates(seed, dialect):
    spec = random_cell(dialect, np.random.default_rng(seed))
    g = build_network(spec)
    assert validate(g).ok
    for s, d in g.edges:
        if g.nodes[d].kind not in (OpKind.CONCAT,):
            assert g.nodes[s].out_shape == g.nodes[d].in_shape


@given(st.integers(0, 2 ** 31), st.sampled_from(list(Dialect)))
def test_lowering_deterministic_bytes(seed, dialect):
    spec = random_cell(dialect, np.random.default_rng(seed))
    assert serialize(build_network(spec)) == serialize(build_network(spec))


def test_desk_scale_node_counts(lowered_graphs):
    sizes = [len(g) for g in lowered_graphs]
    assert min(sizes) >= 11 and max(sizes) <= 200


def test_macro_validation():
    with pytest.raises(ValueError):
        MacroConfig(stages=0)
    g = build_network(NB201Cell(("conv1x1",) * 6), MacroConfig((16, 16, 3), 8, 2, 2))
    assert validate(g).ok


# ----------------------------------------------------------------- sampling

@pytest.mark.parametrize("dialect", list(Dialect))
def test_random_cell_deterministic(dialect):
    a = random_cell(dialect, np.random.default_rng(0))
    b = random_cell(dialect, np.random.default_rng(0))
    assert a == b


def test_nb201_edge0_uniform():
    rng = np.random.default_rng(0)
    vocab = VOCABULARY[Dialect.NB201]
    counts = Counter(random_cell(Dialect.NB201, rng).edges[0] for _ in range(10_000))
    freqs = np.array([counts[v] for v in vocab]) / 10_000
    assert np.all(np.abs(freqs - 0.2) <= 0.02)
    # degenerate (all-zero) cells are resampled, which barely tilts the marginal
    assert chisquare([counts[v] for v in vocab]).pvalue > 1e-3


def test_nb101_samples_respect_limits():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        spec = random_cell(Dialect.NB101, rng)
        assert spec.num_vertices <= 7 and spec.num_edges <= 9
        check_cell(spec)


def test_nb301_inputs_precede_node():
    rng = np.random.default_rng(2)
    for _ in range(500):
        spec = random_cell(Dialect.NB301, rng)
        for j, (a, b, _, _) in enumerate(spec.nodes):
            assert a < j + 2 and b < j + 2 and a != b


def test_reduced_vocabulary_sampling():
    rng = np.random.default_rng(3)
    labels = {op for _ in range(200) for op in random_cell("nb201", rng, NB201_REDUCED).edges}
    assert labels == set(NB201_REDUCED)


def test_enumerate_reduced_space():
    cells = enumerate_nb201()
    assert len(cells) == 4 ** 6 == 4096
    assert len(set(cells)) == 4096


# ------------------------------------------------------------------ specs

@pytest.mark.parametrize("dialect", list(Dialect))
def test_text_round_trip(dialect):
    rng = np.random.default_rng(4)
    for _ in range(50):
        spec = random_cell(dialect, rng)
        assert parse_cell(dialect, spec.to_text()) == spec


def test_nb201_text_format():
    assert parse_cell("nb201", ALL_SKIP) == NB201Cell(("skip",) * 6)


@pytest.mark.parametrize("text", [
    "0100000,0010000,0001000,0000100,0000010,0000001,0000001,0000000|input,conv3x3,conv3x3,"
    "conv3x3,conv3x3,conv3x3,conv3x3,output",                          # 8 vertices
    "011,001,000|input,conv5x5,output",                                # bad label
    "010,000,000|input,conv3x3,output",                                # output unreachable
    "011,101,000|input,conv3x3,output",                                # not upper triangular
])
def test_bad_nb101_specs(text):
    with pytest.raises(CellSpecError):
        parse_cell("nb101", text)


def test_nb101_edge_limit():
    n = 7
    full = tuple(tuple(int(j > i) for j in range(n)) for i in range(n))
    spec = NB101Cell(full, ("input",) + ("conv1x1",) * 5 + ("output",))
    with pytest.raises(CellSpecError, match="edges"):
        check_cell(spec)


def test_bad_nb301_inputs():
    with pytest.raises(CellSpecError, match="invalid inputs"):
        check_cell(NB301Cell(((0, 2, "skip", "skip"),) + ((0, 1, "skip", "skip"),) * 3))


def test_prune_drops_dead_vertices():
    m = np.array([[0, 1, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0]])
    spec = prune_nb101(m, ["input", "conv3x3", "maxpool3x3", "output"])
    assert spec.ops == ("input", "conv3x3", "output")
    assert is_valid(spec)
    with pytest.raises(DegenerateCellError):
        prune_nb101(np.zeros((3, 3), int), ["input", "conv3x3", "output"])
