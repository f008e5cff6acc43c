import numpy as np
import pytest
from numpy.testing import assert_allclose

from ccexpand.bp import bethe_log_z, consistency_residual, log_reparam_weight, reparam_weight, run_ibp
from ccexpand.exact import all_states, brute_force_log_z, exact_log_z, exact_marginals
from ccexpand.model import FactorGraph, build_complete, build_grid, build_random_tree


@pytest.mark.parametrize("seed", range(6))
def test_tree_exactness(seed):
    g = build_random_tree(15, seed)
    b, m, conv = run_ibp(g)
    assert conv
    assert abs(bethe_log_z(g, b) - exact_log_z(g)) < 1e-8
    var_m, fac_m = exact_marginals(g)
    for i in range(g.n_variables):
        assert_allclose(b.var_beliefs[i], var_m[i], atol=1e-9)
    for f in range(g.n_factors):
        assert_allclose(b.factor_beliefs[f], fac_m[f], atol=1e-9)
    small = build_random_tree(8, seed, max_card=3)
    bs, _, _ = run_ibp(small)
    x = all_states(small.cards)
    assert reparam_weight(small, bs, x).sum() == pytest.approx(1.0, abs=1e-8)


def test_beliefs_and_messages_normalized():
    g = build_grid(3, 3, 0.2, 0.5, 0)
    b, m, _ = run_ibp(g)
    for t in b.var_beliefs + b.factor_beliefs:
        assert t.sum() == pytest.approx(1.0, abs=1e-12) and (t > 0).all()
    for msg in m.messages:
        assert msg.sum() == pytest.approx(1.0, abs=1e-12)


def test_uniform_model_fixed_point():
    g = FactorGraph([2, 3, 2], [((0, 1), np.ones((2, 3))), ((1, 2), np.ones((3, 2))), ((0, 2), np.ones((2, 2)))])
    b, _, conv = run_ibp(g)
    assert conv and b.iterations <= 1
    assert_allclose(b.var_beliefs[1], np.full(3, 1 / 3))
    assert consistency_residual(g, b) == 0.0


def test_single_factor_is_exact():
    rng = np.random.default_rng(0)
    g = FactorGraph([2, 3], [((0, 1), rng.random((2, 3)) + 0.1)])
    b, _, _ = run_ibp(g)
    assert_allclose(bethe_log_z(g, b), exact_log_z(g), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_reparameterisation_identities(seed):
    g = build_grid(3, 3, 0.3, 0.9, seed)
    b, _, conv = run_ibp(g)
    assert conv and b.residual < 1e-8 and consistency_residual(g, b) < 1e-8
    x = all_states(g.cards)
    d = g.log_psi(x) - log_reparam_weight(g, b, x)
    assert d.max() - d.min() < 1e-7 * max(1, abs(d.mean()))
    assert_allclose(d.mean(), bethe_log_z(g, b), atol=1e-7)
    z_b = reparam_weight(g, b, x).sum()
    assert_allclose(bethe_log_z(g, b) + np.log(z_b), brute_force_log_z(g), atol=1e-7)


def test_initial_weight_proportional_to_psi():
    # zero iterations: uniform messages, beliefs proportional to factors
    g = build_grid(2, 2, 0.3, 0.7, 3)
    b, _, _ = run_ibp(g, max_iters=0)
    x = all_states(g.cards)
    d = g.log_psi(x) - log_reparam_weight(g, b, x)
    assert d.max() - d.min() < 1e-12


def test_damping_keeps_fixed_point():
    g = build_grid(4, 4, 0.2, 0.6, 1)
    b0, _, c0 = run_ibp(g, damping=0.0)
    b5, _, c5 = run_ibp(g, damping=0.5)
    assert c0 and c5
    for p, q in zip(b0.var_beliefs, b5.var_beliefs):
        assert_allclose(p, q, atol=1e-7)


def test_grid_converges_to_tolerance():
    g = build_grid(10, 10, 0.1, 0.3, 0)
    b, _, conv = run_ibp(g, tol=1e-8)
    assert conv and consistency_residual(g, b) < 1e-8


def test_rejects_bad_arguments():
    g = build_complete(3, 0.1, 0.1, 0)
    with pytest.raises(ValueError):
        run_ibp(g, tol=0)
    with pytest.raises(ValueError):
        run_ibp(g, damping=1.0)
