"""Exact partition functions and marginals.

:func:`exact_log_z` runs log-domain variable elimination along a min-fill
order.  :func:`brute_force_log_z` is an independent enumeration oracle that
materialises the full joint table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .elimination import contract, min_fill
from .errors import CapacityError
from .model import FactorGraph

DEFAULT_WIDTH_CAP = 20
BRUTE_FORCE_LIMIT = 2**24


@dataclass(frozen=True)
class EliminationOrder:
    order: tuple[int, ...]
    induced_width: int


def min_fill_order(g: FactorGraph) -> EliminationOrder:
    order, width = min_fill(g.scopes(), range(g.n_variables))
    return EliminationOrder(tuple(order), width)


def sorted_table(scope, table: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    """Reorder table axes so the scope is ascending."""
    perm = sorted(range(len(scope)), key=lambda k: scope[k])
    return tuple(scope[k] for k in perm), np.transpose(table, perm)


def log_tables(g: FactorGraph):
    return [sorted_table(f.scope, np.log(f.table)) for f in g.factors]


def _check_width(g: FactorGraph, width_cap: int | None, keep=()):
    if width_cap is None:
        return
    _, width = min_fill(g.scopes(), range(g.n_variables), keep)
    if width > width_cap:
        raise CapacityError(f"induced width {width} exceeds cap {width_cap}")


def exact_log_z(g: FactorGraph, width_cap: int | None = DEFAULT_WIDTH_CAP) -> float:
    if g.n_variables == 0:
        return 0.0
    cards = dict(enumerate(g.cards))
    return contract(log_tables(g), cards, log=True, width_cap=width_cap)


def all_states(cards) -> np.ndarray:
    """Every joint state, row-major (last variable fastest), shape (prod(cards), n)."""
    grids = np.indices(tuple(cards)).reshape(len(cards), -1)
    return grids.T.copy()


def _joint_log(g: FactorGraph) -> np.ndarray:
    size = math.prod(g.cards)
    if size > BRUTE_FORCE_LIMIT:
        raise CapacityError(f"state space {size} exceeds brute-force limit {BRUTE_FORCE_LIMIT}")
    joint = np.zeros(g.cards)
    n = g.n_variables
    for f in g.factors:
        scope, t = sorted_table(f.scope, np.log(f.table))
        shape = [1] * n
        for v in scope:
            shape[v] = g.cards[v]
        joint = joint + t.reshape(shape)
    return joint


def brute_force_log_z(g: FactorGraph) -> float:
    return float(logsumexp(_joint_log(g)))


def brute_force_marginals(g: FactorGraph):
    joint = _joint_log(g)
    p = np.exp(joint - logsumexp(joint))
    var_m = [p.sum(axis=tuple(a for a in range(g.n_variables) if a != v)) for v in range(g.n_variables)]
    fac_m = []
    for f in g.factors:
        m = p.sum(axis=tuple(a for a in range(g.n_variables) if a not in f.scope))
        # axes of m are sorted scope order
        order = sorted(f.scope)
        fac_m.append(np.transpose(m, [order.index(v) for v in f.scope]))
    return var_m, fac_m


def exact_marginals(g: FactorGraph, width_cap: int | None = DEFAULT_WIDTH_CAP):
    """Normalised marginals ``(var_marginals, factor_marginals)``.

    Factor marginals follow the factor's scope order.  One elimination is
    run per factor, keeping its scope.
    """
    cards = dict(enumerate(g.cards))
    tables = log_tables(g)
    fac_m = []
    var_m: list[np.ndarray | None] = [None] * g.n_variables
    for f in g.factors:
        _check_width(g, width_cap, keep=f.scope)
        joint = contract(tables, cards, log=True, keep=f.scope)
        joint = np.exp(joint - logsumexp(joint))
        order = sorted(f.scope)
        fac_m.append(np.transpose(joint, [order.index(v) for v in f.scope]))
        for ax, v in enumerate(order):
            if var_m[v] is None:
                var_m[v] = joint.sum(axis=tuple(a for a in range(len(order)) if a != ax))
    return var_m, fac_m
