from itertools import combinations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ccexpand.bp import bethe_log_z, reparam_weight, run_ibp
from ccexpand.cce import (
    build_poset,
    cce_estimate,
    cce_poset,
    cce_region_estimate,
    check_calibrated,
    close_poset,
    cumulants,
    kappa_numbers,
    mobius_matrix,
    partial_log_z,
    partial_log_zs,
    region_cluster,
    region_clusters_within,
    region_partial_log_z,
)
from ccexpand.clusters import complete_windows, enumerate_complete_clusters, enumerate_grid_clusters, grid_windows
from ccexpand.errors import CapacityError, PreconditionError
from ccexpand.exact import all_states, brute_force_log_z, exact_log_z
from ccexpand.model import Cluster, FactorGraph, build_complete, build_grid, grid_geometry
from ccexpand.region import gbp_log_z, gbp_reparam_weight, recipe_region_graph, run_gbp

from conftest import cycle_graph, two_loop_graph


def _face_pairs():
    """1x3 grid of faces: the two face pairs and their shared face."""
    g = build_grid(2, 4, 0.2, 0.7, 0)
    geo = grid_geometry(g)
    f1, f2, f3 = (set(geo.face_factors(0, c)) for c in range(3))
    return g, Cluster.of(f1 | f2), Cluster.of(f2 | f3), Cluster.of(f2)


def _pairwise(g):
    return [f.id for f in g.factors if f.arity >= 2]


# ---------------------------------------------------------------------------
# partial log Z


def test_partial_log_z_vanishes_on_trees_and_single_factors():
    g = build_grid(3, 3, 0.3, 0.8, 1)
    b, _, _ = run_ibp(g)
    for f in range(g.n_factors):
        assert abs(partial_log_z(g, b, Cluster((f,)), prune=False)) < 1e-12
    idx = g.scope_index
    rows = [(r * 3 + c, r * 3 + c + 1) for r in range(3) for c in range(2)]
    spanning = [idx[frozenset(e)] for e in rows + [(0, 3), (3, 6)]]  # a comb
    assert abs(partial_log_z(g, b, Cluster.of(spanning), prune=False)) < 1e-9


def test_partial_log_z_whole_graph_is_log_zb():
    g = build_grid(3, 3, 0.3, 0.8, 1)
    b, _, _ = run_ibp(g)
    z_b = reparam_weight(g, b, all_states(g.cards)).sum()
    whole = Cluster.of(range(g.n_factors))
    assert_allclose(partial_log_z(g, b, whole), np.log(z_b), atol=1e-12)
    assert_allclose(partial_log_z(g, b, whole, prune=False), np.log(z_b), atol=1e-12)


def test_pruning_preserves_value():
    g = cycle_graph(5, 4, pendant=True)
    b, _, _ = run_ibp(g)
    c = Cluster.of(range(g.n_factors))
    assert_allclose(partial_log_z(g, b, c, prune=True), partial_log_z(g, b, c, prune=False), atol=1e-12)


# ---------------------------------------------------------------------------
# posets


def test_close_poset_examples():
    disjoint = close_poset([Cluster((1, 2)), Cluster((3, 4))])
    assert len(disjoint) == 2 and disjoint.hasse_edges == []
    _, a21, a22, a12 = _face_pairs()
    p = close_poset([a21, a22])
    assert [c for c in p.nodes] == [a21, a22, a12]
    assert sorted(p.hasse_edges) == [(0, 2), (1, 2)]
    assert p.levels == [2, 2, 1]
    a, b, c = Cluster((1, 2, 3, 9)), Cluster((1, 2, 4, 8)), Cluster((1, 2, 5, 8, 9))
    q = close_poset([a, b, c])
    assert sum(n == Cluster((1, 2)) for n in q.nodes) == 1
    assert q.is_closed()


def test_hasse_edges_are_covers(rng):
    sets = [Cluster.of(rng.choice(12, size=rng.integers(2, 7), replace=False)) for _ in range(12)]
    p = close_poset(sets)
    assert p.is_closed()
    covers = set()
    for i, j in combinations(range(len(p)), 2):
        for hi, lo in ((i, j), (j, i)):
            if p.nodes[lo] < p.nodes[hi]:
                between = any(p.nodes[lo] < p.nodes[k] < p.nodes[hi] for k in range(len(p)))
                if not between:
                    covers.add((hi, lo))
    assert set(p.hasse_edges) == covers


def test_budget():
    with pytest.raises(CapacityError, match="budget"):
        close_poset([Cluster.of(s) for s in combinations(range(8), 5)], budget=20)


# ---------------------------------------------------------------------------
# kappa and cumulants


def test_kappa_examples():
    _, a21, a22, _ = _face_pairs()
    assert close_poset([a21, a22]).kappa == [1, 1, -1]
    assert build_poset([Cluster((1, 2))]).kappa == [1]
    assert build_poset([Cluster((1, 2, 3)), Cluster((1, 2))]).kappa == [1, 0]


def test_face_pair_identity():
    g, a21, a22, a12 = _face_pairs()
    b, _, _ = run_ibp(g)
    res = cce_estimate(g, b, [a21, a22], prune=False)
    z = [partial_log_z(g, b, c, prune=False) for c in (a21, a22, a12)]
    assert res.correction == pytest.approx(z[0] + z[1] - z[2], abs=1e-14)
    assert res.naive == pytest.approx(z[0] + z[1], abs=1e-14)
    assert res.estimate == bethe_log_z(g, b) + res.correction


def test_kappa_telescopes_and_matches_mobius(rng):
    for _ in range(5):
        sets = [Cluster.of(rng.choice(10, size=rng.integers(2, 6), replace=False)) for _ in range(7)]
        p = close_poset(sets)
        n = len(p)
        assert n <= 60
        kappa = kappa_numbers(p)
        assert all(isinstance(k, int) for k in kappa)
        mu = mobius_matrix(p)
        below = np.array([[p.nodes[a] <= p.nodes[b] for b in range(n)] for a in range(n)])
        # every node is covered exactly once by the truncated series
        for beta in range(n):
            assert sum(kappa[a] for a in range(n) if below[beta, a]) == 1
            assert kappa[beta] == sum(int(mu[beta, a]) for a in range(n) if below[beta, a])
        zs = rng.standard_normal(n)
        C = cumulants(p, zs)
        explicit = [sum(mu[bb, a] * zs[bb] for bb in range(n) if below[bb, a]) for a in range(n)]
        assert_allclose(C, explicit, atol=1e-10)


def test_bottom_cumulants_equal_log_z():
    _, a21, a22, _ = _face_pairs()
    p = close_poset([a21, a22])
    C = cumulants(p, [0.3, 0.5, 0.2])
    assert C[2] == 0.2
    assert_allclose(C[:2], [0.1, 0.3])


def test_tree_clusters_have_zero_cumulant():
    g = build_grid(5, 5, 0.3, 0.8, 0)
    b, _, _ = run_ibp(g)
    stars = [Cluster.of(g.var_to_factors[v]) for v in (6, 7, 12)]
    res = cce_estimate(g, b, stars, prune=False)
    assert np.abs(res.log_z).max() < 1e-9 and np.abs(res.cumulant).max() < 1e-8
    assert abs(res.correction) < 1e-9


def test_disconnected_cluster_cumulant():
    g = build_grid(5, 5, 0.3, 0.8, 2)
    b, _, _ = run_ibp(g)
    geo = grid_geometry(g)
    fa, fb = Cluster.of(geo.face_factors(0, 0)), Cluster.of(geo.face_factors(3, 3))
    both = Cluster.of(fa.members + fb.members)
    p = close_poset([both, fa, fb])
    res = cce_estimate(g, b, [both, fa, fb], poset=p)
    k = p.index(both)
    assert abs(res.log_z[k]) > 1e-4
    assert_allclose(res.log_z[k], res.log_z[p.index(fa)] + res.log_z[p.index(fb)], atol=1e-9)
    assert abs(res.cumulant[k]) < 1e-8


def test_unit_factor_extension():
    base = build_grid(3, 3, 0.3, 0.8, 3)
    unit = base.scope_index[frozenset((4, 5))]
    tables = [(f.scope, np.ones_like(f.table) if f.id == unit else f.table) for f in base.factors]
    g = FactorGraph(base.cards, tables, meta=base.meta)
    b, _, _ = run_ibp(g)
    geo = grid_geometry(g)
    alpha = Cluster.of(geo.face_factors(0, 0) + geo.face_factors(1, 0))
    ext = Cluster.of(alpha.members + (unit,))
    res = cce_estimate(g, b, [ext, alpha], close=False)
    assert abs(res.cumulant[0]) < 1e-9


def test_cumulant_continuity():
    base = build_grid(3, 3, 0.3, 0.8, 5)
    geo = grid_geometry(base)
    alpha = Cluster.of(geo.face_factors(0, 0))
    extra = base.scope_index[frozenset((2, 5))]
    ext = Cluster.of(alpha.members + (extra,) + (base.scope_index[frozenset((1, 2))],))
    out = []
    for s in (1.0, 0.5, 0.25, 0.1, 0.0):
        tables = [(f.scope, f.table**s if f.id == extra else f.table) for f in base.factors]
        g = FactorGraph(base.cards, tables)
        b, _, _ = run_ibp(g)
        res = cce_estimate(g, b, [ext, alpha], close=False)
        out.append(abs(res.cumulant[0]))
    assert out[-1] < 1e-9
    assert all(x >= y for x, y in zip(out, out[1:]))


# ---------------------------------------------------------------------------
# estimates


def test_whole_cycle_cluster_is_exact():
    g = cycle_graph(4, 6)
    b, _, _ = run_ibp(g)
    res = cce_estimate(g, b, [Cluster.of(range(g.n_factors))])
    z_b = reparam_weight(g, b, all_states(g.cards)).sum()
    assert_allclose(res.correction, np.log(z_b), atol=1e-12)
    assert_allclose(res.estimate, exact_log_z(g), atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_powerset_telescopes(seed):
    g = two_loop_graph(seed)
    b, _, _ = run_ibp(g)
    pool = [Cluster.of(s) for r in range(1, g.n_factors + 1) for s in combinations(range(g.n_factors), r)]
    res = cce_estimate(g, b, pool, close=False, prune=False)
    assert_allclose(res.estimate, exact_log_z(g), atol=1e-7)


def test_core_closure_matches_plain_closure():
    g = build_grid(3, 4, 0.2, 0.8, 1)
    b, _, _ = run_ibp(g)
    clusters = enumerate_grid_clusters(g, 15)
    pruned = cce_estimate(g, b, clusters)
    plain = cce_estimate(g, b, clusters, prune=False)
    assert len(pruned.poset) < len(plain.poset)
    assert_allclose(pruned.correction, plain.correction, atol=1e-10)


def test_poset_reuse_gives_same_estimate():
    g = build_grid(4, 4, 0.2, 0.5, 0)
    clusters = enumerate_grid_clusters(g, 15)
    p = cce_poset(g, clusters)
    b, _, _ = run_ibp(g)
    assert cce_estimate(g, b, clusters, poset=p).estimate == cce_estimate(g, b, clusters).estimate
    b2, _, _ = run_ibp(build_grid(4, 4, 0.2, 0.5, 1))
    assert len(partial_log_zs(g, b2, p.nodes)) == len(p)


def test_grid_faces_4x4_beats_bethe():
    g = build_grid(4, 4, 0.1, 0.6, 0)
    b, _, _ = run_ibp(g)
    exact = exact_log_z(g)
    res = cce_estimate(g, b, enumerate_grid_clusters(g, 15))
    assert abs(res.estimate - exact) < abs(bethe_log_z(g, b) - exact)


# ---------------------------------------------------------------------------
# enumeration


def test_grid_cluster_counts():
    g = build_grid(10, 10, 0.1, 0.1, 0)
    faces = enumerate_grid_clusters(g, 3)
    assert len(faces) == 81 and all(len(c) == 4 for c in faces)
    assert len(enumerate_grid_clusters(build_grid(2, 2, 0.1, 0.1, 0), 15)) == 1
    # two faces sharing an edge: 7 factors
    two = enumerate_grid_clusters(build_grid(2, 3, 0.1, 0.1, 0), 6)
    assert [len(c) for c in two] == [4, 4, 7]
    three = enumerate_grid_clusters(build_grid(2, 4, 0.1, 0.1, 0), 6)
    assert [len(c) for c in three] == [4, 4, 4, 7, 7]


def test_grid_cluster_levels_nested():
    g = build_grid(5, 5, 0.1, 0.1, 0)
    small = {c.frozen for c in enumerate_grid_clusters(g, 7)}
    large = enumerate_grid_clusters(g, 15)
    assert small <= {c.frozen for c in large}
    assert len({c.frozen for c in large}) == len(large)
    assert max(len(c) for c in large) <= 16
    # diagonal neighbours share only a vertex: 8 factors
    assert any(len(c) == 8 for c in large)


def test_complete_cluster_counts():
    g = build_complete(15, 0.1, 0.1, 0)
    assert len(enumerate_complete_clusters(g, 3)) == 455
    assert len(enumerate_complete_clusters(g, 4, through_vertex=0, k_min=4)) == 364
    k4s = enumerate_complete_clusters(g, 4, k_min=4)
    idx = g.scope_index
    a = Cluster.of(idx[frozenset(p)] for p in combinations((0, 1, 2, 3), 2))
    b2 = Cluster.of(idx[frozenset(p)] for p in combinations((0, 1, 2, 4), 2))
    assert a in k4s and b2 in k4s
    p = close_poset([a, b2])
    assert Cluster.of(idx[frozenset(q)] for q in combinations((0, 1, 2), 2)) in p.nodes
    with pytest.raises(ValueError):
        enumerate_complete_clusters(g, 7)


# ---------------------------------------------------------------------------
# region clusters


@pytest.fixture(scope="module")
def crg3():
    g = build_grid(3, 3, 0.2, 0.7, 4)
    rg = recipe_region_graph(g, "faces")
    return g, rg, run_gbp(rg)


def test_local_counting_numbers(crg3):
    g, rg, res = crg3
    rc = region_clusters_within(rg, [(0, 1, 2, 3, 4, 5)])[0]
    # two faces, edges {1,4} {3,4} {4,5} and site {4}
    by_vars = {rg.regions[r].variables: rc.counting[r] for r in rc.members}
    assert by_vars == {(0, 1, 3, 4): 1, (1, 2, 4, 5): 1, (1, 4): -1, (3, 4): 0, (4, 5): 0, (4,): 0}
    kept = {rg.regions[r].variables for r in rc.retained}
    assert kept == {(0, 1, 3, 4), (1, 2, 4, 5), (1, 4)}
    # two faces joined by their shared edge: singly connected
    assert abs(region_partial_log_z(rg, res, rc)) < 1e-8


def test_all_regions_give_log_zb(crg3):
    g, rg, res = crg3
    rc = region_cluster(rg, range(len(rg.regions)))
    z_b = gbp_reparam_weight(rg, res, all_states(g.cards)).sum()
    assert_allclose(region_partial_log_z(rg, res, rc), np.log(z_b), atol=1e-10)
    est = cce_region_estimate(rg, res, [rc]).estimate
    assert_allclose(est, exact_log_z(g), atol=1e-8)


def test_disconnected_region_cluster():
    g = build_grid(4, 4, 0.2, 0.7, 1)
    rg = recipe_region_graph(g, "faces")
    res = run_gbp(rg)
    a = region_clusters_within(rg, [(0, 1, 4, 5)])[0]
    b = region_clusters_within(rg, [(10, 11, 14, 15)])[0]
    both = region_cluster(rg, a.members.members + b.members.members)
    out = cce_region_estimate(rg, res, [both, a, b], close=True)
    k = out.poset.index(both.members)
    assert abs(out.cumulant[k]) < 1e-8


def test_region_estimate_empty_and_precondition(crg3):
    g, rg, res = crg3
    out = cce_region_estimate(rg, res, [])
    assert out.correction == 0 and out.estimate == gbp_log_z(rg, res)
    raw = run_gbp(rg, max_iters=1)
    with pytest.raises(PreconditionError):
        check_calibrated(rg, raw, 1e-6)
    with pytest.raises(PreconditionError):
        cce_region_estimate(rg, raw, region_clusters_within(rg, grid_windows(g)))


def test_region_cce_improves_on_gbp_grid():
    g = build_grid(5, 5, 0.1, 0.6, 0)
    rg = recipe_region_graph(g, "faces")
    res = run_gbp(rg)
    exact = exact_log_z(g)
    out = cce_region_estimate(rg, res, region_clusters_within(rg, grid_windows(g)))
    assert abs(out.estimate - exact) < abs(gbp_log_z(rg, res) - exact)


def test_star_closure_stays_balanced():
    g = build_complete(7, 0.1, 0.3, 0)
    rg = recipe_region_graph(g, "star")
    rcs = region_clusters_within(rg, complete_windows(g, 4, 6, 0))
    out = cce_region_estimate(rg, run_gbp(rg), rcs)
    for node in out.poset.nodes[out.poset.n_inputs:]:
        vs = sorted({v for r in node.members for v in rg.regions[r].variables})
        assert 0 in vs
        assert rg.regions_within(vs) == node.frozen
