"""Genotype derivation vs a brute-force oracle, format round trips, discrete nets."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelnas import tensor as tc
from skelnas.errors import ParseError
from skelnas.genotype import (
    Genotype,
    build_discrete_network,
    derive_genotype,
    genotype_dot,
    parse_genotype,
    random_genotype,
    serialize_genotype,
)
from skelnas.ops import CandidateOpKind
from skelnas.supernet import NUM_EDGES, SuperNet, init_alpha, softmax_matrix

ZERO = int(CandidateOpKind.Zero)


def oracle_derive_cell(alpha_matrix):
    """Enumerate every (edge, non-Zero op) pair and sort explicitly."""
    probs = softmax_matrix(np.asarray(alpha_matrix, dtype=np.float64))
    entries = []
    e = 0
    for j in range(4):
        n_in = 2 + j
        pairs = []
        for local in range(n_in):
            for op in range(8):
                if op == ZERO:
                    continue
                pairs.append((probs[e + local, op], local, op))
        # strongest op per edge, ties to the lower op index
        per_edge = {}
        for weight, local, op in sorted(pairs, key=lambda p: (-p[0], p[1], p[2])):
            per_edge.setdefault(local, (weight, op))
        ranked_edges = sorted(
            per_edge.items(), key=lambda item: (-item[1][0], item[0])
        )[:2]
        entry = tuple(
            (CandidateOpKind(op), local)
            for local, (_, op) in sorted(ranked_edges, key=lambda item: item[0])
        )
        entries.append(entry)
        e += n_in
    return tuple(entries)


def test_derivation_matches_oracle_over_1000_seeds():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        normal = rng.normal(size=(NUM_EDGES, 8))
        reduce_ = rng.normal(size=(NUM_EDGES, 8))
        got = derive_genotype((normal, reduce_))
        assert got.normal == oracle_derive_cell(normal)
        assert got.reduce == oracle_derive_cell(reduce_)


def test_spiked_alpha_selects_the_spiked_pairs():
    normal = np.zeros((NUM_EDGES, 8))
    normal[0, int(CandidateOpKind.Conv3)] = 5.0  # edge input0 -> n0
    normal[1, int(CandidateOpKind.Conv3)] = 5.0  # edge input1 -> n0
    got = derive_genotype((normal, np.zeros((NUM_EDGES, 8))))
    assert got.normal[0] == (
        (CandidateOpKind.Conv3, 0),
        (CandidateOpKind.Conv3, 1),
    )


def test_uniform_alpha_tie_breaks_to_conv3_on_lowest_edges():
    flat = np.zeros((NUM_EDGES, 8))
    got = derive_genotype((flat, flat))
    for side in (got.normal, got.reduce):
        for entry in side:
            assert entry == (
                (CandidateOpKind.Conv3, 0),
                (CandidateOpKind.Conv3, 1),
            )


def test_row_shift_invariance():
    rng = np.random.default_rng(7)
    normal = rng.normal(size=(NUM_EDGES, 8))
    reduce_ = rng.normal(size=(NUM_EDGES, 8))
    base = derive_genotype((normal, reduce_))
    shifts = rng.normal(size=(NUM_EDGES, 1)) * 10.0
    shifted = derive_genotype((normal + shifts, reduce_ + shifts))
    assert base == shifted


def test_serialize_parse_round_trip():
    g = random_genotype(99)
    text = serialize_genotype(g)
    assert text.startswith("SARNAS-GENO v1\n")
    assert parse_genotype(text) == g
    assert serialize_genotype(parse_genotype(text)) == text


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_round_trip_property(seed):
    g = random_genotype(seed)
    assert parse_genotype(serialize_genotype(g)) == g


def test_parse_specific_line():
    text = serialize_genotype(random_genotype(5))
    lines = text.splitlines()
    lines[1] = "normal n0: Conv3<-input0, SpeConv3<-input1"
    g = parse_genotype("\n".join(lines) + "\n")
    assert g.normal[0] == (
        (CandidateOpKind.Conv3, 0),
        (CandidateOpKind.SpeConv3, 1),
    )


@pytest.mark.parametrize(
    "mutation",
    [
        ("normal n0: Zero<-input0, Conv3<-input1", "Zero"),
        ("normal n0: Conv7<-input0, Conv3<-input1", "unknown operator"),
        ("normal n0: Conv3<-n3, Conv3<-input1", "does not precede"),
        ("normal n0: Conv3<-input0, Conv3<-input0", "duplicate source"),
        ("normal n0: Conv3<-elbow, Conv3<-input1", "unknown source"),
    ],
)
def test_parse_rejections(mutation):
    bad_line, needle = mutation
    text = serialize_genotype(random_genotype(5))
    lines = text.splitlines()
    lines[1] = bad_line
    with pytest.raises(ParseError) as exc:
        parse_genotype("\n".join(lines) + "\n")
    assert needle.lower() in str(exc.value).lower()
    assert exc.value.line == 2


def test_parse_rejects_bad_header_and_order():
    with pytest.raises(ParseError):
        parse_genotype("WRONG v1\n")
    text = serialize_genotype(random_genotype(5))
    lines = text.splitlines()
    lines[1], lines[2] = lines[2], lines[1]
    with pytest.raises(ParseError):
        parse_genotype("\n".join(lines) + "\n")


def test_genotype_rejects_zero_and_bad_sources_at_construction():
    entry_ok = ((CandidateOpKind.Conv3, 0), (CandidateOpKind.Conv3, 1))
    with pytest.raises(Exception):
        Genotype(
            (entry_ok, entry_ok, entry_ok,
             ((CandidateOpKind.Zero, 0), (CandidateOpKind.Conv3, 1))),
            (entry_ok,) * 4,
        )


def test_discrete_network_paper_configuration():
    g = random_genotype(11)
    net = build_discrete_network(g, num_cells=9, C_init=16, num_classes=60, seed=0)
    assert net.reduction_indices == (2, 5)  # third and sixth cells, 1-based
    x = np.zeros((1, 3, 112, 50), dtype=np.float32)
    logits = net.forward(x, train=False)
    assert logits.shape == (1, 60)


def test_discrete_network_desk_smoke_training():
    from skelnas.train import TrainConfig, train_network

    rng = np.random.default_rng(0)
    X = rng.standard_normal((16, 3, 8, 6)).astype(np.float32)
    y = (np.arange(16) % 3).astype(np.int64)
    g = random_genotype(3)
    net = build_discrete_network(g, num_cells=4, C_init=8, num_classes=3, seed=1)
    summary = train_network(
        net, (X, y), None, TrainConfig(epochs=2, batch_size=8, lr=0.01, seed=0)
    )
    assert summary["param_count"] == net.param_count()
    assert 0.0 <= summary["train_top1"] <= 1.0


def test_discrete_param_count_below_supernet():
    g = random_genotype(17)
    for L, C in ((4, 8), (6, 16)):
        discrete = build_discrete_network(g, L, C, num_classes=5, seed=0)
        supernet = SuperNet(L, C, num_classes=5, seed=0)
        assert discrete.param_count() < supernet.param_count()


def test_discrete_shape_law_matches_supernet():
    g = random_genotype(29)
    net = build_discrete_network(g, 4, 8, num_classes=3, seed=0)
    supernet = SuperNet(4, 8, num_classes=3, seed=0)
    alphas = init_alpha(0)
    x = np.random.default_rng(1).standard_normal((2, 3, 16, 12)).astype(np.float32)
    assert net.forward(x).shape == supernet.forward(x, alphas).shape
    assert net.C_out == supernet.C_out


def test_genotype_dot_exports_8_operator_edges():
    g = random_genotype(31)
    for side in ("normal", "reduce"):
        dot = genotype_dot(g, side)
        assert dot.count("label=") == 8
        assert genotype_dot(g, side) == dot


def test_derivation_rejects_non_finite():
    bad = np.zeros((NUM_EDGES, 8))
    bad[0, 0] = np.nan
    with pytest.raises(Exception):
        derive_genotype((bad, np.zeros((NUM_EDGES, 8))))
