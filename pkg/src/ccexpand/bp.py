"""Loopy belief propagation on factor graphs and the Bethe approximation.

Messages live in the log domain inside a run and are vectorised over groups
of factors with identical table shapes.  The synchronous update

    m_fi <- delta(x_i) * m_fi,   delta = sum_{x_f \\ x_i} b_f / b_i

is computed in its equivalent direct form (the old m_fi cancels), then
geometrically damped and renormalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .elimination import _lse
from .errors import NumericalError
from .exact import sorted_table
from .model import FactorGraph


@dataclass
class MessageSet:
    """Normalised factor-to-variable messages, one per (factor, variable) edge."""

    edges: list[tuple[int, int]]
    messages: list[np.ndarray]

    def __getitem__(self, edge: tuple[int, int]) -> np.ndarray:
        return self.messages[self.edges.index(edge)]


@dataclass
class BeliefSet:
    """Calibrated (or last-iterate) beliefs.

    ``factor_beliefs[f]`` has the axes of factor f's scope.
    """

    var_beliefs: list[np.ndarray]
    factor_beliefs: list[np.ndarray]
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True
    _log_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def log_var(self, i: int) -> np.ndarray:
        key = ("v", i)
        if key not in self._log_cache:
            self._log_cache[key] = np.log(self.var_beliefs[i])
        return self._log_cache[key]

    def log_factor_sorted(self, f: int, scope) -> tuple[tuple[int, ...], np.ndarray]:
        key = ("f", f)
        if key not in self._log_cache:
            self._log_cache[key] = sorted_table(scope, np.log(self.factor_beliefs[f]))
        return self._log_cache[key]


class _Layout:
    """Edge indexing and factor groups for one graph."""

    def __init__(self, g: FactorGraph):
        self.n = g.n_variables
        self.cards = np.array(g.cards)
        self.dmax = int(self.cards.max()) if self.n else 0
        self.edges: list[tuple[int, int]] = []
        self.edge_of: list[list[int]] = []
        for f in g.factors:
            ids = []
            for v in f.scope:
                ids.append(len(self.edges))
                self.edges.append((f.id, v))
            self.edge_of.append(ids)
        self.edge_var = np.array([v for _, v in self.edges], dtype=int)
        self.valid = np.arange(self.dmax)[None, :] < self.cards[self.edge_var][:, None]
        groups: dict[tuple, list[int]] = {}
        for f in g.factors:
            groups.setdefault(f.table.shape, []).append(f.id)
        self.groups = []
        for shape, fids in groups.items():
            logpsi = np.stack([np.log(g.factors[f].table) for f in fids])
            pos = []
            for p, d in enumerate(shape):
                e = np.array([self.edge_of[f][p] for f in fids])
                bshape = [len(fids)] + [1] * len(shape)
                bshape[p + 1] = d
                others = tuple(a + 1 for a in range(len(shape)) if a != p)
                pos.append((e, self.edge_var[e], d, tuple(bshape), others))
            self.groups.append((fids, logpsi, pos))


@lru_cache(maxsize=16)
def _layout(g: FactorGraph) -> _Layout:
    return _Layout(g)


def _var_log_beliefs(lay: _Layout, M: np.ndarray) -> np.ndarray:
    lb = np.zeros((lay.n, lay.dmax))
    np.add.at(lb, lay.edge_var, M)
    lb[np.arange(lay.dmax)[None, :] >= lay.cards[:, None]] = -np.inf
    return lb - _lse(lb, 1)[:, None]


def _sweep(lay: _Layout, M: np.ndarray, want_beliefs: bool = False):
    """One synchronous update.  Returns new messages, the residual of the
    beliefs implied by ``M`` and optionally those beliefs."""
    lb = _var_log_beliefs(lay, M)
    new = np.full_like(M, -np.inf)
    residual = 0.0
    fac_beliefs = {}
    for fids, logpsi, pos in lay.groups:
        joint = logpsi.copy()
        incoming = []
        for e, v, d, bshape, _ in pos:
            n_p = lb[v, :d] - M[e, :d]
            incoming.append(n_p)
            joint = joint + n_p.reshape(bshape)
        flat = joint.reshape(len(fids), -1)
        lz = _lse(flat, 1)
        for (e, v, d, bshape, others), n_p in zip(pos, incoming):
            marg = joint
            for ax in sorted(others, reverse=True):
                marg = _lse(marg, ax)
            msg = marg - n_p
            new[e, :d] = msg - _lse(msg, 1)[:, None]
            diff = np.abs(np.exp(marg - lz[:, None]) - np.exp(lb[v, :d]))
            residual = max(residual, float(diff.max()))
        if want_beliefs:
            probs = np.exp(joint - lz.reshape((-1,) + (1,) * (joint.ndim - 1)))
            for k, f in enumerate(fids):
                fac_beliefs[f] = probs[k] / probs[k].sum()
    return new, residual, lb, fac_beliefs


def _check_finite(lay: _Layout, M: np.ndarray):
    bad = ~np.isfinite(M) & lay.valid
    if bad.any():
        e = int(np.argwhere(bad)[0, 0])
        f, v = lay.edges[e]
        raise NumericalError(f"non-finite message on edge factor {f} -> variable {v}")


def _beliefs(lay: _Layout, M: np.ndarray, iterations: int, converged: bool) -> BeliefSet:
    _, residual, lb, fb = _sweep(lay, M, want_beliefs=True)
    var_b = []
    for i in range(lay.n):
        b = np.exp(lb[i, : lay.cards[i]])
        var_b.append(b / b.sum())
    return BeliefSet(var_b, [fb[f] for f in range(len(lay.edge_of))], residual, iterations, converged)


def run_ibp(
    g: FactorGraph,
    tol: float = 1e-8,
    max_iters: int = 10000,
    damping: float = 0.0,
) -> tuple[BeliefSet, MessageSet, bool]:
    """Synchronous sum-product from uniform messages.

    Stops once both the largest message change and the marginal
    consistency residual fall below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    lay = _layout(g)
    M = np.where(lay.valid, -np.log(lay.cards[lay.edge_var])[:, None], -np.inf)
    change = np.inf
    converged = False
    it = 0
    for it in range(max_iters + 1):
        new, residual, _, _ = _sweep(lay, M)
        if residual < tol and change < tol:
            converged = True
            break
        if it == max_iters:
            break
        if damping > 0:
            new = np.where(lay.valid, damping * np.where(lay.valid, M, 0) + (1 - damping) * np.where(lay.valid, new, 0), -np.inf)
            new = new - _lse(new, 1)[:, None]
        _check_finite(lay, new)
        change = float(np.abs(np.exp(new) - np.exp(M)).max())
        M = new
    beliefs = _beliefs(lay, M, it, converged)
    messages = MessageSet(list(lay.edges), [np.exp(M[e, : lay.cards[v]]) for e, (_, v) in enumerate(lay.edges)])
    return beliefs, messages, converged


def beliefs_from_messages(g: FactorGraph, messages: MessageSet) -> BeliefSet:
    """Beliefs implied by a message set."""
    lay = _layout(g)
    M = np.full((len(lay.edges), lay.dmax), -np.inf)
    for e, (_, v) in enumerate(lay.edges):
        M[e, : lay.cards[v]] = np.log(messages.messages[e])
    return _beliefs(lay, M, 0, False)


def consistency_residual(g: FactorGraph, b: BeliefSet) -> float:
    """max over edges of L_inf(sum_{x_f \\ x_i} b_f, b_i)."""
    worst = 0.0
    for f in g.factors:
        bf = b.factor_beliefs[f.id]
        for ax, v in enumerate(f.scope):
            marg = bf.sum(axis=tuple(a for a in range(f.arity) if a != ax))
            worst = max(worst, float(np.abs(marg - b.var_beliefs[v]).max()))
    return worst


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def bethe_log_z(g: FactorGraph, b: BeliefSet) -> float:
    total = 0.0
    for f in g.factors:
        bf = b.factor_beliefs[f.id]
        total += float((bf * np.log(f.table)).sum()) + _entropy(bf)
    for i in range(g.n_variables):
        total += (1 - g.degree(i)) * _entropy(b.var_beliefs[i])
    return total


def log_reparam_weight(g: FactorGraph, b: BeliefSet, x) -> np.ndarray | float:
    """log prod_f b_f(x_f) prod_i b_i(x_i)^(1 - |F_i|) for one or many states."""
    x = np.asarray(x, dtype=int)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    total = np.zeros(xs.shape[0])
    for f in g.factors:
        total += np.log(b.factor_beliefs[f.id][tuple(xs[:, v] for v in f.scope)])
    for i in range(g.n_variables):
        total += (1 - g.degree(i)) * np.log(b.var_beliefs[i][xs[:, i]])
    return float(total[0]) if single else total


def reparam_weight(g: FactorGraph, b: BeliefSet, x) -> np.ndarray | float:
    return np.exp(log_reparam_weight(g, b, x))
