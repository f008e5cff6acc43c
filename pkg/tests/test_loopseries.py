import math
from itertools import combinations

import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_allclose

from ccexpand.bp import bethe_log_z, reparam_weight, run_ibp
from ccexpand.exact import all_states, exact_log_z
from ccexpand.loopseries import (
    enumerate_tls_loops,
    is_generalized_loop,
    loop_term,
    loop_terms,
    ls_estimate,
    simple_loops,
)
from ccexpand.model import Cluster, build_grid, build_random_tree, core_scopes

from conftest import cycle_graph, two_loop_graph


def _pairwise(g):
    return [f.id for f in g.factors if f.arity >= 2]


def _all_generalized_loops(g):
    fs = _pairwise(g)
    out = set()
    for r in range(2, len(fs) + 1):
        for sub in combinations(fs, r):
            if len(core_scopes({f: g.factors[f].scope for f in sub})) == r:
                out.add(frozenset(sub))
    return out


def _term_by_enumeration(g, b, members):
    x = all_states(g.cards)
    w = np.ones(len(x))
    for i in range(g.n_variables):
        w *= b.var_beliefs[i][x[:, i]]
    for f in members:
        sc = g.factors[f].scope
        ratio = b.factor_beliefs[f][tuple(x[:, v] for v in sc)]
        for v in sc:
            ratio = ratio / b.var_beliefs[v][x[:, v]]
        w *= ratio - 1
    return w.sum()


def test_tree_has_no_loops():
    assert enumerate_tls_loops(build_random_tree(10, 0), 100, 10) == []


def test_single_cycle_one_loop():
    g = cycle_graph(4, 0)
    loops = enumerate_tls_loops(g, 10, 10)
    assert [l.cluster for l in loops] == [Cluster(tuple(_pairwise(g)))]


def test_simple_loop_count_matches_networkx():
    g = build_grid(3, 4, 0.1, 0.1, 0)
    g_nx = nx.Graph([f.scope for f in g.factors if f.arity == 2])
    expected = {frozenset(frozenset(e) for e in zip(c, c[1:] + c[:1])) for c in nx.simple_cycles(g_nx)}
    loops = simple_loops(g, 10_000)
    got = {frozenset(frozenset(g.factors[f].scope) for f in c.members) for c in loops}
    assert got == expected
    lengths = [len(c) for c in loops]
    assert lengths == sorted(lengths)


def test_tls_on_2x3_covers_all_generalized_loops():
    g = build_grid(2, 3, 0.1, 0.5, 0)
    loops = enumerate_tls_loops(g, 1000, 10)
    got = {l.cluster.frozen for l in loops}
    assert got == _all_generalized_loops(g)
    assert len(got) == 4
    assert [l.discovery_index for l in loops] == list(range(len(loops)))
    assert all(is_generalized_loop(g, l.cluster.members) for l in loops)


def test_tls_deterministic_and_capped():
    g = build_grid(4, 4, 0.1, 0.5, 0)
    a = enumerate_tls_loops(g, 50, 4)
    b = enumerate_tls_loops(g, 50, 4)
    assert [l.cluster for l in a] == [l.cluster for l in b]
    assert len(enumerate_tls_loops(g, 50, 4, max_loops=60)) == 60
    assert len({l.cluster for l in a}) == len(a)
    with pytest.raises(ValueError):
        enumerate_tls_loops(g, 0, 4)


def test_loop_terms_vanish_off_loops():
    g = cycle_graph(4, 1, pendant=True)
    b, _, _ = run_ibp(g)
    pend = [f.id for f in g.factors if f.arity == 2]
    assert abs(loop_term(g, b, Cluster.of(pend))) < 1e-12  # cycle plus pendant
    assert abs(loop_term(g, b, Cluster.of(pend[:1]))) < 1e-12
    assert abs(_term_by_enumeration(g, b, pend[:1])) < 1e-12


def test_cycle_term_is_zb_minus_one():
    g = cycle_graph(4, 2)
    b, _, _ = run_ibp(g)
    z_b = reparam_weight(g, b, all_states(g.cards)).sum()
    assert_allclose(loop_term(g, b, Cluster.of(_pairwise(g))), z_b - 1, atol=1e-12)


def test_terms_match_enumeration():
    g = build_grid(3, 3, 0.2, 0.8, 1)
    b, _, _ = run_ibp(g)
    loops = enumerate_tls_loops(g, 30, 4)
    got = loop_terms(g, b, [l.cluster for l in loops])
    want = [_term_by_enumeration(g, b, l.cluster.members) for l in loops]
    assert_allclose(got, want, atol=1e-10)


def test_estimate_on_tree_and_cycle():
    t = build_random_tree(8, 1)
    b, _, _ = run_ibp(t)
    tr = ls_estimate(t, b, [])
    assert tr.estimate == bethe_log_z(t, b) and not tr.flagged
    g = cycle_graph(5, 3, cards=3)
    b, _, _ = run_ibp(g)
    tr = ls_estimate(g, b, enumerate_tls_loops(g, 10, 10))
    assert_allclose(tr.estimate, exact_log_z(g), atol=1e-8)


def test_completeness_on_small_graph():
    for seed in range(3):
        g = two_loop_graph(seed)
        b, _, _ = run_ibp(g)
        loops = [Cluster(tuple(s)) for s in _all_generalized_loops(g)]
        z_b = reparam_weight(g, b, all_states(g.cards)).sum()
        assert_allclose(1 + loop_terms(g, b, loops).sum(), z_b, atol=1e-8)


def test_running_estimate_and_flagging():
    g = build_grid(3, 3, 0.2, 0.6, 2)
    b, _, _ = run_ibp(g)
    loops = enumerate_tls_loops(g, 20, 3)
    tr = ls_estimate(g, b, loops)
    acc = 1.0
    for e in tr.entries:
        acc += e.term
        assert_allclose(e.estimate, bethe_log_z(g, b) + math.log(acc))


def test_large_grid_improves_on_bethe():
    g = build_grid(10, 10, 0.1, 0.1, 0)
    b, _, _ = run_ibp(g)
    exact = exact_log_z(g)
    tr = ls_estimate(g, b, enumerate_tls_loops(g, 200, 10, max_loops=2000))
    assert abs(tr.estimate - exact) < abs(bethe_log_z(g, b) - exact)
