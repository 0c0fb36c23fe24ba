import json

import numpy as np
import pydot
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import derive_oracle
from pcdarts.genotype import (
    PC_DARTS_CIFAR,
    Genotype,
    count_costs,
    derive,
    derive_cell,
    jaccard,
    to_dot,
    validate,
)
from pcdarts.ops import OPS
from pcdarts.search_space import ArchParams, init_arch_params, n_edges


def arch_from(alpha_n, beta_n, alpha_r=None, beta_r=None, nodes=None):
    alpha_r = alpha_n if alpha_r is None else alpha_r
    beta_r = beta_n if beta_r is None else beta_r
    return ArchParams.from_tensors({"alpha.normal": np.asarray(alpha_n, float), "alpha.reduce": np.asarray(alpha_r, float),
                                    "beta.normal": np.asarray(beta_n, float), "beta.reduce": np.asarray(beta_r, float)},
                                   nodes=nodes)


def test_three_node_toy():
    alpha = np.zeros((2, 8))
    alpha[0, OPS.index("sep_conv_3x3")] = 2.0
    alpha[1, OPS.index("skip_connect")] = 2.0
    g = derive(arch_from(alpha, np.zeros(2)), 3)
    assert sorted(g.normal, key=lambda e: e[1]) == [("sep_conv_3x3", 0), ("skip_connect", 1)]
    assert g.concat == (2,)
    assert validate(g) == []


def test_zero_excluded_unless_kept():
    alpha = np.zeros((2, 8))
    alpha[:, OPS.index("zero")] = 5.0
    alpha[:, OPS.index("max_pool_3x3")] = 1.0
    g = derive(arch_from(alpha, np.zeros(2)), 3)
    assert [op for op, _ in g.normal] == ["max_pool_3x3"] * 2
    kept = derive(arch_from(alpha, np.zeros(2)), 3, keep_zero=True)
    assert [op for op, _ in kept.normal] == ["zero"] * 2
    assert ("excluded-op", "normal node 2: zero") in validate(kept)
    assert validate(kept, allow_zero=True) == []


def test_needs_three_nodes():
    arch = init_arch_params(3, seed=0)
    arch.nodes = 2
    with pytest.raises(ValueError, match="at least 3"):
        derive(arch)


def test_arity_mismatch_named():
    with pytest.raises(ValueError, match="arity mismatch"):
        derive(init_arch_params(5, seed=0), 6)


def test_ties_prefer_lower_predecessor_then_earlier_op():
    g = derive(arch_from(np.zeros((n_edges(5), 8)), np.zeros(n_edges(5))), 5)
    assert g.normal == (("sep_conv_3x3", 0), ("sep_conv_3x3", 1)) * 3


def test_edge_normalization_reweights_edges():
    alpha = np.zeros((5, 8))
    alpha[2, 0] = 3.0          # edge (0,3) strongest by alpha ...
    alpha[3, 1] = 2.0
    alpha[4, 2] = 1.0
    beta = np.array([0.0, 0.0, -10.0, 0.0, 0.0])  # ... but suppressed by beta
    plain = derive(arch_from(alpha, beta), 4, edge_normalization=False)
    normed = derive(arch_from(alpha, beta), 4, edge_normalization=True)
    assert plain.normal[2:] == (("sep_conv_3x3", 0), ("sep_conv_5x5", 1))
    assert normed.normal[2:] == (("sep_conv_5x5", 1), ("dil_conv_3x3", 2))


def _draw(rng, nodes, discrete):
    E = n_edges(nodes)
    if discrete:
        # coarse values make ties between edges and ops common
        return rng.integers(0, 3, size=(E, 8)).astype(float), rng.integers(0, 2, size=E).astype(float)
    return rng.normal(size=(E, 8)), rng.normal(size=E)


@pytest.mark.parametrize("discrete", [False, True])
@pytest.mark.parametrize("en", [True, False])
def test_matches_brute_force(discrete, en):
    rng = np.random.default_rng(11 + discrete)
    for _ in range(120):
        alpha, beta = _draw(rng, 6, discrete)
        got = derive_cell(alpha, beta, 6, en)
        assert got == derive_oracle.derive_cell(alpha, beta, 6, en, OPS)


@pytest.mark.parametrize("nodes", [3, 4, 5])
def test_matches_brute_force_small_cells(nodes):
    rng = np.random.default_rng(nodes)
    for _ in range(100):
        alpha, beta = _draw(rng, nodes, discrete=bool(rng.integers(2)))
        assert derive_cell(alpha, beta, nodes) == derive_oracle.derive_cell(alpha, beta, nodes, True, OPS)


@given(st.integers(0, 2**31 - 1), st.floats(-20, 20), st.integers(2, 5))
@settings(max_examples=80, deadline=None)
def test_beta_shift_leaves_genotype(seed, c, j):
    rng = np.random.default_rng(seed)
    alpha, beta = rng.normal(size=(14, 8)), rng.normal(size=14)
    off = sum(range(2, j))
    shifted = beta.copy()
    shifted[off:off + j] += c
    assert derive_cell(alpha, beta, 6) == derive_cell(alpha, shifted, 6)


@given(st.integers(0, 2**31 - 1), st.floats(-20, 20))
@settings(max_examples=50, deadline=None)
def test_alpha_row_shift_leaves_genotype(seed, c):
    rng = np.random.default_rng(seed)
    alpha, beta = rng.normal(size=(14, 8)), rng.normal(size=14)
    shifted = alpha.copy()
    shifted[int(rng.integers(14))] += c
    assert derive_cell(alpha, beta, 6) == derive_cell(shifted, beta, 6)


def test_op_permutation_commutes():
    rng = np.random.default_rng(3)
    for _ in range(50):
        alpha, beta = rng.normal(size=(14, 8)), rng.normal(size=14)
        perm = rng.permutation(8)
        ops = tuple(OPS[k] for k in perm)
        assert derive_cell(alpha[:, perm], beta, 6, ops=ops) == derive_cell(alpha, beta, 6)


def test_derived_always_valid():
    for seed in range(30):
        g = derive(init_arch_params(6, seed=seed))
        assert validate(g) == []


def test_sum_score_is_available():
    rng = np.random.default_rng(0)
    alpha, beta = rng.normal(size=(14, 8)), rng.normal(size=14)
    assert validate(Genotype(derive_cell(alpha, beta, 6, score="sum"), derive_cell(alpha, beta, 6))) == []
    with pytest.raises(ValueError):
        derive_cell(alpha, beta, 6, score="mean")


# ---------------------------------------------------------------------------
# validation

def test_validate_flags_duplicates_and_bad_predecessors():
    bad = Genotype((("sep_conv_3x3", 0), ("skip_connect", 0)), (("sep_conv_3x3", 0), ("skip_connect", 2)), (2,))
    codes = [c for c, _ in validate(bad)]
    assert codes == ["duplicate-predecessor", "bad-predecessor"]


def test_validate_arity_and_concat():
    g = Genotype((("sep_conv_3x3", 0),), (("sep_conv_3x3", 0), ("sep_conv_3x3", 1)), (2, 3))
    codes = {c for c, _ in validate(g, nodes=3)}
    assert codes == {"wrong-arity", "bad-concat"}
    assert {c for c, _ in validate(Genotype((("conv_9x9", 0), ("skip_connect", 1)),
                                            (("sep_conv_3x3", 0), ("skip_connect", 1)), (2,)))} == {"unknown-op"}


def test_json_schema_roundtrip():
    text = PC_DARTS_CIFAR.to_json()
    doc = json.loads(text)
    assert list(doc) == ["normal", "reduce", "concat"]
    assert doc["normal"][0] == ["sep_conv_3x3", 1]
    assert doc["concat"] == [2, 3, 4, 5]
    assert Genotype.from_json(text) == PC_DARTS_CIFAR
    with pytest.raises(ValueError):
        Genotype.from_json('{"normal": [["sep_conv_3x3", "0"]], "reduce": [], "concat": [2]}')
    with pytest.raises(ValueError):
        Genotype.from_json("not json")


def test_jaccard():
    assert jaccard(PC_DARTS_CIFAR, PC_DARTS_CIFAR) == 1.0
    other = derive(init_arch_params(6, seed=0))
    assert 0.0 <= jaccard(PC_DARTS_CIFAR, other) < 1.0
    assert jaccard(PC_DARTS_CIFAR, other) == jaccard(other, PC_DARTS_CIFAR)


# ---------------------------------------------------------------------------
# costs

def test_published_cifar_cells_parameter_count():
    report = count_costs(PC_DARTS_CIFAR, C0=36, layers=20, classes=10, resolution=32)
    assert report.params == pytest.approx(3.6e6, rel=0.05)


def test_costs_additive():
    r = count_costs(PC_DARTS_CIFAR, C0=16, layers=8)
    b = r.breakdown
    assert r.params == b["stem"] + sum(b["cells"]) + b["classifier"]
    assert len(b["cells"]) == 8


def test_skip_only_cells_have_no_edge_params():
    skip = Genotype((("skip_connect", 0), ("skip_connect", 1)), (("max_pool_3x3", 0), ("avg_pool_3x3", 1)), (2,))
    conv = Genotype((("sep_conv_3x3", 0), ("skip_connect", 1)), (("max_pool_3x3", 0), ("avg_pool_3x3", 1)), (2,))
    a = count_costs(skip, C0=8, layers=3, resolution=8)
    b = count_costs(conv, C0=8, layers=3, resolution=8)
    # only the preprocessing convs remain in a skip/pool cell
    C = 8
    pre = 3 * C * C + 2 * C  # stem-width input (24) -> 8, plus affine BN
    assert a.breakdown["cells"][0] == 2 * pre
    assert b.params > a.params


def _conv_params(report):
    return report.params - report.breakdown["classifier"]


def test_width_doubling_roughly_quadruples():
    a = count_costs(PC_DARTS_CIFAR, C0=16, layers=8)
    b = count_costs(PC_DARTS_CIFAR, C0=32, layers=8)
    ratio = _conv_params(b) / _conv_params(a)
    assert 3.6 < ratio < 4.0


def test_mobile_verdict_consistent():
    r = count_costs(PC_DARTS_CIFAR, C0=36, layers=20, resolution=32)
    assert r.mobile == (r.macs <= 600_000_000)
    assert r.macs > 0


def test_costs_reject_invalid():
    bad = Genotype((("zero", 0), ("zero", 0)), (("zero", 0), ("zero", 0)), (2,))
    with pytest.raises(ValueError, match="invalid genotype"):
        count_costs(bad)


# ---------------------------------------------------------------------------
# DOT

def test_dot_parses_and_counts():
    text = to_dot(PC_DARTS_CIFAR)
    graphs = pydot.graph_from_dot_data(text)
    assert graphs and len(graphs) == 1
    g = graphs[0]
    subs = g.get_subgraphs()
    assert [s.get_name() for s in subs] == ["cluster_normal", "cluster_reduce"]
    for s in subs:
        nodes = [n for n in s.get_nodes() if n.get_name() not in ("node", "graph", "edge")]
        assert len(nodes) == 2 + 4 + 1
        labelled = [e for e in s.get_edges() if e.get("label")]
        assert len(labelled) == 8
        assert len(s.get_edges()) == 8 + 4


def test_dot_deterministic():
    assert to_dot(PC_DARTS_CIFAR).encode() == to_dot(Genotype.from_json(PC_DARTS_CIFAR.to_json())).encode()
