import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpspde.contractions import Contraction
from jumpspde.graphs import (Edge, LabeledMultigraph, all_pass, alpha_gamma, beta_gamma, check_integrability,
                             condition_slacks, contract_graph, exponents, improved_labels, load_corpus,
                             random_labeled_graph, validate_graph)


def _psi(d, a):
    verts = ("star", "u", "w")
    roles = {"star": "star", "u": "up", "w": "noise"}
    edges = (Edge("star", "u", 0.0, 0, "test"), Edge("w", "u", a, 0))
    G = LabeledMultigraph(verts, roles, edges, d, {"w": 1}, "psi")
    return G, Contraction(("w",), (1,), (("w",),), (True,))


def _oracle(G, gamma):
    """Exponents from vertex and block counts only, without the contracted graph."""
    s = G.d + 2
    n_int, n_noise = len(G.internal), len(G.noise)
    n_blocks, n_flag = len(gamma.blocks), sum(gamma.flagged)
    total_a = sum(e.a for e in G.edges)
    alpha = (n_int + n_blocks - n_flag / 2) * s - total_a
    beta = (n_noise - 2 * n_blocks + n_flag) * s / 2
    return alpha, beta


@pytest.mark.parametrize("d,a", [(1, 2.0), (3, 3.0)])
def test_psi_exponent_is_minus_half(d, a):
    G, gamma = _psi(d, a)
    rep = exponents(G, gamma)
    assert rep.alpha == -0.5
    assert rep.beta == 0.0
    assert all_pass(rep.conditions)
    # kappa is capped at beta = 0 while the uncapped slack stays positive
    assert rep.kappa_sup == 0.0 and rep.kappa_slack > 0


def test_corpus_verdicts():
    entries = load_corpus()
    names = {e.name for e in entries}
    assert {"kpz_triangle_pre", "phi4_C2_pre", "kpz_triangle_post", "phi4_C2_post"} <= names
    for e in entries:
        assert not validate_graph(e.graph), e.name
        rep = check_integrability(contract_graph(e.graph, e.gamma))
        failing = sorted(k for k, c in rep.items() if not c.passed)
        assert failing == sorted(e.failing), e.name
        assert all_pass(rep) == (e.expected == "pass"), e.name


def test_bracket_pair_slacks_by_hand():
    entries = {e.name: e for e in load_corpus()}
    pre = contract_graph(entries["phi4_psi2_bracket_pre"].graph, entries["phi4_psi2_bracket_pre"].gamma)
    post = contract_graph(entries["phi4_psi2_bracket_post"].graph, entries["phi4_psi2_bracket_post"].gamma)
    # two parallel (3, 0) edges merge to a = 6; a raw pair has no shift, a compensated pair -s/2
    assert [e.a for e in pre.edges if e.r == 0 and e.src != "star"] == [6.0]
    assert sorted(improved_labels(pre)) == [0.0, 6.0]
    assert sorted(improved_labels(post)) == [0.0, 3.5]
    c1 = dict(condition_slacks(pre, improved_labels(pre))["c1"])
    assert min(c1.values()) == pytest.approx(-1.0)


def test_validation_catches_structural_errors():
    G, _ = _psi(1, 2.0)
    assert validate_graph(G) == []
    bad = LabeledMultigraph(G.vertices, G.roles, G.edges + (Edge("u", "w", 1.0),), 1, {"w": 1})
    assert any(v.rule == "noise" for v in validate_graph(bad))
    loop = LabeledMultigraph(G.vertices, G.roles, G.edges + (Edge("u", "u", 1.0),), 1, {"w": 1})
    assert any(v.rule == "loopless" for v in validate_graph(loop))
    neg = LabeledMultigraph(G.vertices, G.roles, (G.edges[0], Edge("w", "u", -1.0)), 1, {"w": 1})
    assert any(v.rule == "labels" for v in validate_graph(neg))
    par = LabeledMultigraph(G.vertices, G.roles, G.edges + (Edge("w", "u", 1.0, 1), Edge("w", "u", 1.0, 2)),
                            1, {"w": 1})
    assert any(v.rule == "parallel" for v in validate_graph(par))


def test_graph_dict_round_trip():
    for e in load_corpus():
        back = LabeledMultigraph.from_dict(e.graph.to_dict())
        assert back.to_dict() == e.graph.to_dict()


def test_contraction_must_cover_noise():
    G, _ = _psi(1, 2.0)
    with pytest.raises(ValueError):
        contract_graph(G, Contraction(("x",), (1,), (("x",),), (True,)))


def test_fuzzed_exponents_match_oracle():
    rng = np.random.default_rng(2024)
    verdicts = []
    for _ in range(1000):
        G, gamma = random_labeled_graph(rng)
        assert validate_graph(G) == []
        H = contract_graph(G, gamma)
        alpha, beta = _oracle(G, gamma)
        rep = exponents(G, gamma, H)
        assert rep.alpha == pytest.approx(alpha, abs=1e-12)
        assert rep.beta == pytest.approx(beta, abs=1e-12)
        assert abs(rep.alpha_tilde - (alpha + beta)) <= 1e-12
        verdicts.append(all_pass(rep.conditions))
    # the fuzz corpus exercises both verdicts
    assert 0 < sum(verdicts) < len(verdicts)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_raising_a_label_never_helps(seed):
    # slacks of c1-c3 decrease and c4 increases with every label, so raising all
    # labels by one can only turn c1-c3 failures into more failures
    G, gamma = random_labeled_graph(np.random.default_rng(seed))
    H = contract_graph(G, gamma)
    L = improved_labels(H)
    base = condition_slacks(H, L)
    up = condition_slacks(H, [x + 1 for x in L])
    for name in ("c1", "c2", "c3"):
        for (_, a), (_, b) in zip(base[name], up[name]):
            assert b <= a + 1e-12
    for (_, a), (_, b) in zip(base["c4"], up["c4"]):
        assert b >= a - 1e-12
    assert alpha_gamma(G, gamma, H) + beta_gamma(G, gamma) == pytest.approx(
        sum(_oracle(G, gamma)), abs=1e-12)
