import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ccexpand.elimination import contract
from ccexpand.errors import CapacityError
from ccexpand.exact import (
    brute_force_log_z,
    brute_force_marginals,
    exact_log_z,
    exact_marginals,
    log_tables,
    min_fill_order,
)
from ccexpand.model import FactorGraph, build_complete, build_grid, build_random_tree


def test_single_variable():
    g = FactorGraph([2], [((0,), np.ones(2))])
    assert exact_log_z(g) == pytest.approx(math.log(2))


def test_brute_force_trivial():
    g = FactorGraph([2, 2], [((0, 1), np.ones((2, 2)))])
    assert brute_force_log_z(g) == pytest.approx(math.log(4))
    p = np.array([[0.1, 0.2], [0.3, 0.4]])
    assert brute_force_log_z(FactorGraph([2, 2], [((0, 1), p)])) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_elimination_matches_brute_force(seed):
    g = build_grid(3, 3, 0.3, 0.9, seed)
    assert_allclose(exact_log_z(g), brute_force_log_z(g), atol=1e-10)
    k4 = build_complete(4, 0.2, 0.8, seed)
    assert_allclose(exact_log_z(k4), brute_force_log_z(k4), atol=1e-10)


def test_mixed_cardinalities():
    g = build_random_tree(8, 3, max_card=4)
    assert_allclose(exact_log_z(g), brute_force_log_z(g), atol=1e-10)


def test_elimination_order_invariance():
    g = build_grid(3, 4, 0.3, 1.0, 2)
    cards = dict(enumerate(g.cards))
    base = contract(log_tables(g), cards, log=True)
    rng = np.random.default_rng(0)
    for _ in range(3):
        perm = rng.permutation(g.n_variables)
        relabel = {int(v): k for k, v in enumerate(perm)}
        tables = [
            (tuple(sorted(relabel[v] for v in s)), np.transpose(t, np.argsort([relabel[v] for v in s])))
            for s, t in log_tables(g)
        ]
        got = contract(tables, {relabel[v]: c for v, c in cards.items()}, log=True)
        assert_allclose(got, base, atol=1e-10)


def test_large_couplings_do_not_overflow():
    g = build_grid(4, 4, 1.0, 40.0, 0)
    assert np.isfinite(exact_log_z(g))
    assert_allclose(exact_log_z(g), brute_force_log_z(g), rtol=1e-12)


def test_marginals():
    g = FactorGraph([2], [((0,), np.array([2.0, 6.0]))])
    var_m, _ = exact_marginals(g)
    assert_allclose(var_m[0], [0.25, 0.75])
    g = build_grid(2, 2, 0.3, 0.7, 1)
    var_m, fac_m = exact_marginals(g)
    bf_v, bf_f = brute_force_marginals(g)
    for a, b in zip(var_m, bf_v):
        assert_allclose(a, b, atol=1e-12)
    for f, a, b in zip(g.factors, fac_m, bf_f):
        assert_allclose(a, b, atol=1e-12)
        assert a.sum() == pytest.approx(1.0, abs=1e-12)
        for ax, v in enumerate(f.scope):
            other = tuple(k for k in range(f.arity) if k != ax)
            assert_allclose(a.sum(axis=other) if other else a, var_m[v], atol=1e-10)


def test_min_fill_widths():
    chain = build_grid(1, 8, 0.1, 0.1, 0)
    assert min_fill_order(chain).induced_width == 1
    assert min_fill_order(build_complete(15, 0.1, 0.1, 0)).induced_width == 14
    order = min_fill_order(build_grid(10, 10, 0.1, 0.1, 0))
    assert sorted(order.order) == list(range(100))
    # greedy min-fill, lowest-id ties; frozen from an independent simulation
    assert order.induced_width == 13


def test_width_cap():
    g = build_complete(12, 0.1, 0.1, 0)
    with pytest.raises(CapacityError, match="width 11"):
        exact_log_z(g, width_cap=5)
