"""Quick invariant checks behind ``ccexpand selftest``."""

from __future__ import annotations

import math
from itertools import combinations
from typing import Callable

import numpy as np

from .bp import bethe_log_z, log_reparam_weight, run_ibp
from .cce import cce_estimate, cce_region_estimate, close_poset, partial_log_z, region_clusters_within
from .exact import all_states, exact_log_z
from .loopseries import is_generalized_loop, loop_terms
from .model import Cluster, build_grid, build_random_tree, grid_geometry
from .region import gbp_log_z, log_gbp_reparam_weight, recipe_region_graph, run_gbp


def _relative_spread(d: np.ndarray) -> float:
    return float(d.max() - d.min()) / max(1.0, float(np.abs(d).mean()))


def check_trees(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for k in range(10):
        g = build_random_tree(12, seed * 100 + k)
        b, _, conv = run_ibp(g)
        if not conv:
            return False, f"IBP did not converge on tree {k}"
        worst = max(worst, abs(bethe_log_z(g, b) - exact_log_z(g)))
    return worst < 1e-8, f"max |bethe - exact| = {worst:.2e}"


def check_reparameterisation(seed: int) -> tuple[bool, str]:
    g = build_grid(2, 3, 0.3, 0.8, seed)
    b, _, _ = run_ibp(g)
    x = all_states(g.cards)
    d = g.log_psi(x) - log_reparam_weight(g, b, x)
    spread = _relative_spread(d)
    z_b = float(np.exp(log_reparam_weight(g, b, x)).sum())
    gap = abs(exact_log_z(g) - bethe_log_z(g, b) - math.log(z_b))
    rg = recipe_region_graph(g, "faces")
    res = run_gbp(rg)
    dg = g.log_psi(x) - log_gbp_reparam_weight(rg, res.beliefs, x)
    spread_g = _relative_spread(dg)
    z_g = float(np.exp(log_gbp_reparam_weight(rg, res.beliefs, x)).sum())
    gap_g = abs(exact_log_z(g) - gbp_log_z(rg, res) - math.log(z_g))
    ok = spread < 1e-7 and gap < 1e-7 and spread_g < 1e-7 and gap_g < 1e-7
    return ok, f"bp spread {spread:.1e} gap {gap:.1e}; gbp spread {spread_g:.1e} gap {gap_g:.1e}"


def check_tree_clusters(seed: int) -> tuple[bool, str]:
    g = build_grid(4, 4, 0.2, 0.7, seed)
    b, _, _ = run_ibp(g)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        v = int(rng.integers(g.n_variables))
        members = [f for f in g.var_to_factors[v]]  # a star is a tree
        worst = max(worst, abs(partial_log_z(g, b, Cluster.of(members), prune=False)))
    return worst < 1e-9, f"max |log Z| over star clusters = {worst:.1e}"


def check_telescoping(seed: int) -> tuple[bool, str]:
    g = build_grid(2, 3, 0.3, 0.9, seed)
    b, _, _ = run_ibp(g)
    pair = [f.id for f in g.factors if f.arity == 2]
    pool = [Cluster.of(s) for r in range(1, len(pair) + 1) for s in combinations(pair, r)]
    res = cce_estimate(g, b, pool, close=False)
    err = abs(res.estimate - exact_log_z(g))
    loops = [c for c in pool if is_generalized_loop(g, c.members)]
    x = all_states(g.cards)
    z_b = float(np.exp(log_reparam_weight(g, b, x)).sum())
    ls = abs(1 + float(loop_terms(g, b, loops).sum()) - z_b)
    return err < 1e-7 and ls < 1e-8, f"cce {err:.1e}, loop series {ls:.1e}"


def check_face_pair_kappa(seed: int) -> tuple[bool, str]:
    # a row of three faces; clusters are the two adjacent face pairs
    g = build_grid(2, 4, 0.3, 0.5, seed)
    b, _, _ = run_ibp(g)
    geo = grid_geometry(g)
    f1, f2, f3 = (geo.face_factors(0, c) for c in range(3))
    a21, a22, a12 = Cluster.of(f1 + f2), Cluster.of(f2 + f3), Cluster.of(f2)
    poset = close_poset([a21, a22])
    ok = poset.nodes == [a21, a22, a12] and poset.kappa == [1, 1, -1]
    res = cce_estimate(g, b, [a21, a22], prune=False)
    parts = [partial_log_z(g, b, c, prune=False) for c in (a21, a22, a12)]
    gap = abs(res.correction - (parts[0] + parts[1] - parts[2]))
    return ok and gap < 1e-12, f"kappa {poset.kappa}, identity gap {gap:.1e}"


def check_region_cce(seed: int) -> tuple[bool, str]:
    g = build_grid(3, 3, 0.2, 0.6, seed)
    rg = recipe_region_graph(g, "faces")
    res = run_gbp(rg)
    whole = region_clusters_within(rg, [tuple(range(g.n_variables))])
    est = cce_region_estimate(rg, res, whole).estimate
    err = abs(est - exact_log_z(g))
    return res.converged and err < 1e-7, f"whole-graph region cluster error {err:.1e}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "tree exactness": check_trees,
    "reparameterisation": check_reparameterisation,
    "tree clusters vanish": check_tree_clusters,
    "telescoping": check_telescoping,
    "face-pair kappa": check_face_pair_kappa,
    "region cluster exactness": check_region_cce,
}


def run_selftest(seed: int = 0, out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
