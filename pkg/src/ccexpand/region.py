"""Region graphs, counting numbers and generalized belief propagation.

Inner regions are built by closing the outer regions' variable sets under
intersection.  Each factor is assigned to one parentless region, which is
where its energy is counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .bp import _entropy
from .elimination import _lse
from .errors import ConstructionError, NumericalError
from .exact import sorted_table
from .model import Cluster, FactorGraph, grid_geometry


@dataclass(frozen=True)
class Region:
    id: int
    variables: tuple[int, ...]
    factor_ids: tuple[int, ...]
    counting_number: int


@dataclass
class RegionGraph:
    graph: FactorGraph
    regions: list[Region]
    edges: list[tuple[int, int]]
    parents: list[tuple[int, ...]]
    children: list[tuple[int, ...]]
    ancestors: list[frozenset[int]]
    descendants: list[frozenset[int]]
    assignment: list[int] = field(repr=False)

    def delta(self, r: int) -> frozenset[int]:
        """The region together with all of its descendants."""
        return self.descendants[r] | {r}

    @property
    def counting_numbers(self) -> list[int]:
        return [r.counting_number for r in self.regions]

    def contained_factors(self, r: int) -> list[int]:
        """Factors whose scope lies inside region ``r``'s variables."""
        vs = set(self.regions[r].variables)
        cand = {f for v in vs for f in self.graph.var_to_factors[v]}
        return sorted(f for f in cand if vs.issuperset(self.graph.factors[f].scope))

    def regions_within(self, variables) -> frozenset[int]:
        vs = set(variables)
        return frozenset(r.id for r in self.regions if vs.issuperset(r.variables))


def _closure(varsets: list[frozenset]) -> list[frozenset]:
    seen = set(varsets)
    out = list(dict.fromkeys(varsets))
    frontier = list(out)
    while frontier:
        new = []
        for a in frontier:
            for b in out:
                c = a & b
                if c and c not in seen:
                    seen.add(c)
                    new.append(c)
        out.extend(sorted(new, key=lambda s: (-len(s), sorted(s))))
        frontier = new
    return out


def build_region_graph(g: FactorGraph, outer: Sequence[Cluster | Sequence[int]]) -> RegionGraph:
    """Region graph from outer factor clusters by intersection closure.

    Every factor's scope must lie inside some outer region.  Counting
    numbers: 1 for parentless regions, ``1 - sum(ancestors)`` below.
    """
    outer_sets = []
    for c in outer:
        members = c.members if isinstance(c, Cluster) else tuple(c)
        outer_sets.append(frozenset(g.cluster_variables(members)))
    if not outer_sets:
        raise ConstructionError("no outer regions given")
    varsets = _closure(outer_sets)
    n = len(varsets)
    # supersets among regions (strict)
    ancestors = [frozenset(j for j in range(n) if varsets[j] > varsets[i]) for i in range(n)]
    descendants = [frozenset(j for j in range(n) if varsets[j] < varsets[i]) for i in range(n)]
    order = sorted(range(n), key=lambda i: -len(varsets[i]))
    counting = [0] * n
    for i in order:
        counting[i] = 1 - sum(counting[j] for j in ancestors[i])
    parentless = [i for i in range(n) if not ancestors[i]]
    assignment = []
    for f in g.factors:
        scope = set(f.scope)
        home = next((i for i in parentless if scope <= varsets[i]), None)
        if home is None:
            raise ConstructionError(f"factor {f.id} is not covered by any outer region")
        assignment.append(home)
    factor_ids = [[] for _ in range(n)]
    for fid, r in enumerate(assignment):
        factor_ids[r].append(fid)
    children = []
    for i in range(n):
        below = descendants[i]
        children.append(tuple(sorted(j for j in below if not (ancestors[j] & below))))
    parents = [[] for _ in range(n)]
    edges = []
    for i in range(n):
        for j in children[i]:
            parents[j].append(i)
            edges.append((i, j))
    regions = [Region(i, tuple(sorted(varsets[i])), tuple(factor_ids[i]), counting[i]) for i in range(n)]
    rg = RegionGraph(g, regions, edges, [tuple(p) for p in parents], children, ancestors, descendants, assignment)
    holding = [[] for _ in range(g.n_variables)]
    for r in regions:
        for v in r.variables:
            holding[v].append(r.id)
    for v in range(g.n_variables):
        total = sum(counting[r] for r in holding[v])
        if total != 1:
            raise RuntimeError(f"region graph not 1-balanced at variable {v} (sum {total})")
    for f in g.factors:
        scope = set(f.scope)
        total = sum(counting[r] for r in holding[f.scope[0]] if scope <= varsets[r])
        if total != 1:
            raise RuntimeError(f"region graph not 1-balanced at factor {f.id} (sum {total})")
    return rg


def message_balance(rg: RegionGraph) -> list[int]:
    """Net counting number absorbing a parent-to-child update, per edge.

    Every entry is zero for a region graph whose counting numbers follow the
    ancestor recursion.
    """
    c = rg.counting_numbers
    out = []
    for a, b in rg.edges:
        gain = ({b} | rg.ancestors[b]) - ({a} | rg.ancestors[a])
        out.append(sum(c[r] for r in gain))
    return out


# ---------------------------------------------------------------------------
# recipes


def bethe_outer(g: FactorGraph) -> list[Cluster]:
    return [Cluster.of([f.id]) for f in g.factors]


def faces_outer(g: FactorGraph) -> list[Cluster]:
    geo = grid_geometry(g)
    if geo.rows < 2 or geo.cols < 2:
        raise ConstructionError("face regions need at least a 2x2 grid")
    return [Cluster.of(geo.face_factors(r, c)) for r, c in geo.faces()]


def star_outer(g: FactorGraph, hub: int = 0) -> list[Cluster]:
    """All triangles through ``hub`` on a complete pairwise model."""
    idx = g.scope_index
    others = [v for v in range(g.n_variables) if v != hub]
    if len(others) < 2:
        raise ConstructionError("star construction needs at least three variables")
    out = []
    for i, j in combinations(others, 2):
        tri = [idx[frozenset(p)] for p in ((hub, i), (hub, j), (i, j))]
        out.append(Cluster.of(tri))
    return out


RECIPES = {"bethe": bethe_outer, "faces": faces_outer, "star": star_outer}


def recipe_region_graph(g: FactorGraph, name: str) -> RegionGraph:
    try:
        recipe = RECIPES[name]
    except KeyError:
        raise ValueError(f"unknown region recipe {name!r}; choose from {sorted(RECIPES)}") from None
    return build_region_graph(g, recipe(g))


# ---------------------------------------------------------------------------
# generalized belief propagation


@dataclass
class GBPResult:
    """Normalised region beliefs, axes in ascending variable order."""

    beliefs: list[np.ndarray]
    converged: bool
    residual: float
    iterations: int
    messages: list[np.ndarray] = field(repr=False, default_factory=list)


def _bshape(region_vars, sub_vars, cards):
    sub = set(sub_vars)
    return tuple(cards[v] if v in sub else 1 for v in region_vars)


class _GBPLayout:
    def __init__(self, rg: RegionGraph):
        g = rg.graph
        cards = g.cards
        self.n = len(rg.regions)
        self.shapes = [tuple(cards[v] for v in r.variables) for r in rg.regions]
        # every factor whose scope fits inside a region enters its belief
        self.base = []
        for r in rg.regions:
            acc = np.zeros(self.shapes[r.id])
            for fid in rg.contained_factors(r.id):
                f = g.factors[fid]
                scope, t = sorted_table(f.scope, np.log(f.table))
                acc = acc + t.reshape(_bshape(r.variables, scope, cards))
            self.base.append(acc)
        self.edge_index = {e: k for k, e in enumerate(rg.edges)}
        # incoming messages for each region's belief
        self.incoming = []
        for r in rg.regions:
            delta = rg.delta(r.id)
            inc = []
            for beta in sorted(delta):
                for gamma in rg.parents[beta]:
                    if gamma not in delta:
                        k = self.edge_index[(gamma, beta)]
                        inc.append((k, _bshape(r.variables, rg.regions[beta].variables, cards)))
            self.incoming.append(inc)
        self.sum_axes = []
        for a, b in rg.edges:
            child = set(rg.regions[b].variables)
            self.sum_axes.append(tuple(ax for ax, v in enumerate(rg.regions[a].variables) if v not in child))


def _log_belief(lay: _GBPLayout, M: list[np.ndarray], r: int) -> np.ndarray:
    acc = lay.base[r]
    for k, shape in lay.incoming[r]:
        acc = acc + M[k].reshape(shape)
    return acc - _lse(acc.reshape(-1), 0)


def _marginal(lay: _GBPLayout, lb: np.ndarray, k: int) -> np.ndarray:
    for ax in sorted(lay.sum_axes[k], reverse=True):
        lb = _lse(lb, ax)
    return lb


def _residual(rg: RegionGraph, lay: _GBPLayout, M: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    lb = [_log_belief(lay, M, r) for r in range(lay.n)]
    worst = 0.0
    for k, (a, b) in enumerate(rg.edges):
        diff = np.abs(np.exp(_marginal(lay, lb[a], k)) - np.exp(lb[b]))
        worst = max(worst, float(diff.max()))
    return worst, lb


def _run_parent_child(rg, tol, max_iters, damping):
    lay = _GBPLayout(rg)
    M = [np.full(lay.shapes[b], -np.log(np.prod(lay.shapes[b]))) for _, b in rg.edges]
    converged = False
    it = 0
    for it in range(max_iters + 1):
        residual, lb = _residual(rg, lay, M)
        if residual < tol:
            converged = True
            break
        if it == max_iters:
            break
        for k, (a, b) in enumerate(rg.edges):
            marg = _marginal(lay, _log_belief(lay, M, a), k)
            m = M[k] + marg - _log_belief(lay, M, b)
            if damping > 0:
                m = damping * M[k] + (1 - damping) * m
            m = m - _lse(m.reshape(-1), 0)
            if not np.all(np.isfinite(m)):
                raise NumericalError(f"non-finite message on region edge {a} -> {b}")
            M[k] = m
    beliefs = [np.exp(x) for x in lb]
    return GBPResult([b / b.sum() for b in beliefs], converged, residual, it, [np.exp(m) for m in M])


class _TwoLevel:
    """Outer (parentless) regions exchange messages with every inner region
    they contain.

    Visiting an inner region b solves its stationarity condition with all
    other messages fixed: its belief becomes the geometric combination of
    the outer marginals (cavity form) and every outer region containing b
    is rescaled to agree with it.  With ``anchor`` set, inner regions with
    negative counting numbers use the linearised entropy at the anchor
    instead of their own, which makes each visit an exact block step of a
    convex dual.
    """

    def __init__(self, rg: RegionGraph):
        g = rg.graph
        cards = g.cards
        n = len(rg.regions)
        self.outer = [r for r in range(n) if not rg.ancestors[r]]
        self.inner = [r for r in range(n) if rg.ancestors[r]]
        self.negative = [r for r in self.inner if rg.regions[r].counting_number < 0]
        shapes = [tuple(cards[v] for v in r.variables) for r in rg.regions]
        self.q = [np.full(shapes[r], 1.0 / np.prod(shapes[r])) for r in range(n)]
        for a in self.outer:
            acc = np.zeros(shapes[a])
            for fid in rg.regions[a].factor_ids:
                f = g.factors[fid]
                scope, t = sorted_table(f.scope, np.log(f.table))
                acc = acc + t.reshape(_bshape(rg.regions[a].variables, scope, cards))
            p = np.exp(acc - acc.max())
            self.q[a] = p / p.sum()
        self.links = {}
        for b in self.inner:
            parents = sorted(rg.ancestors[b].intersection(self.outer))
            c = rg.regions[b].counting_number
            power = len(parents) + c
            if power <= 0:
                raise ConstructionError(f"inner region {b} has n + c = {power}; two-level updates need it positive")
            child = set(rg.regions[b].variables)
            entries = []
            for a in parents:
                avars = rg.regions[a].variables
                axes = tuple(ax for ax, v in enumerate(avars) if v not in child)
                entries.append((a, axes, _bshape(avars, rg.regions[b].variables, cards)))
            self.links[b] = (entries, c, power, [np.ones(shapes[b]) for _ in parents])

    def sweep(self, damping: float = 0.0, anchor: dict | None = None) -> float:
        """Visit every inner region once; returns the largest belief change."""
        q = self.q
        change = 0.0
        for b in self.inner:
            entries, c, power, to_outer = self.links[b]
            cavity = [q[a].sum(axis=axes) / m for (a, axes, _), m in zip(entries, to_outer)]
            log_b = sum(np.log(x) for x in cavity)
            if anchor is not None and c < 0:
                log_b = (log_b - c * np.log(anchor[b])) / len(entries)
            else:
                log_b = log_b / power
            if damping > 0:
                log_b = damping * np.log(q[b]) + (1 - damping) * log_b
            new_b = np.exp(log_b - log_b.max())
            new_b /= new_b.sum()
            if not np.all(np.isfinite(new_b)) or not new_b.all():
                raise NumericalError(f"degenerate belief at inner region {b}")
            change = max(change, float(np.abs(new_b - q[b]).max()))
            q[b] = new_b
            for k, ((a, _, shape), cav) in enumerate(zip(entries, cavity)):
                m_new = new_b / cav
                m_new /= m_new.max()
                qa = q[a] * (m_new / to_outer[k]).reshape(shape)
                q[a] = qa / qa.sum()
                to_outer[k] = m_new
        return change


def _run_two_level(rg, tol, max_iters, damping):
    state = _TwoLevel(rg)
    converged = False
    it = 0
    for it in range(max_iters + 1):
        residual = gbp_residual(rg, state.q)
        if residual < tol:
            converged = True
            break
        if it == max_iters:
            break
        state.sweep(damping)
    return GBPResult([b / b.sum() for b in state.q], converged, residual, it)


def _run_double_loop(rg, tol, max_iters, damping, inner_max=50):
    state = _TwoLevel(rg)
    converged = False
    sweeps = 0
    drift = 1.0
    residual = gbp_residual(rg, state.q)
    while sweeps < max_iters:
        anchor = {b: state.q[b].copy() for b in state.negative}
        inner_tol = max(tol, 0.1 * drift)
        for _ in range(inner_max):
            change = state.sweep(damping, anchor)
            sweeps += 1
            if change < inner_tol or sweeps >= max_iters:
                break
        drift = max((float(np.abs(state.q[b] - anchor[b]).max()) for b in state.negative), default=0.0)
        residual = gbp_residual(rg, state.q)
        if residual < tol and drift < tol and change < tol:
            converged = True
            break
    return GBPResult([b / b.sum() for b in state.q], converged, residual, sweeps)


SCHEDULES = ("double-loop", "two-level", "parent-child")


def run_gbp(
    rg: RegionGraph,
    tol: float = 1e-8,
    max_iters: int = 10000,
    damping: float = 0.0,
    schedule: str = "double-loop",
) -> GBPResult:
    """Generalized BP from uniform messages.

    ``"parent-child"`` updates every Hasse edge in turn, multiplying its
    message by the ratio of the parent's marginal to the child's belief.
    ``"two-level"`` visits inner regions in turn and makes every outer
    region containing one consistent with its new belief.
    ``"double-loop"`` (default) runs the two-level updates with the concave
    entropy terms frozen at an anchor that an outer loop moves to the
    current beliefs; it converges where the single-loop forms oscillate.
    All three share fixed points and finish at beliefs preserving the
    product of beliefs raised to the counting numbers.  Converged when every
    parent's marginal matches its child's belief in L_inf to within
    ``tol``; ``iterations`` counts sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    if schedule == "double-loop":
        return _run_double_loop(rg, tol, max_iters, damping)
    if schedule == "two-level":
        return _run_two_level(rg, tol, max_iters, damping)
    if schedule == "parent-child":
        return _run_parent_child(rg, tol, max_iters, damping)
    raise ValueError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")


def gbp_residual(rg: RegionGraph, beliefs: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, b in rg.edges:
        child = set(rg.regions[b].variables)
        axes = tuple(ax for ax, v in enumerate(rg.regions[a].variables) if v not in child)
        worst = max(worst, float(np.abs(beliefs[a].sum(axis=axes) - beliefs[b]).max()))
    return worst


def gbp_log_z(rg: RegionGraph, beliefs: Sequence[np.ndarray] | GBPResult) -> float:
    """Region-based free energy estimate of log Z at the given beliefs."""
    if isinstance(beliefs, GBPResult):
        beliefs = beliefs.beliefs
    g = rg.graph
    total = 0.0
    for r in rg.regions:
        b = beliefs[r.id]
        for fid in r.factor_ids:
            f = g.factors[fid]
            scope, t = sorted_table(f.scope, np.log(f.table))
            total += float((b * t.reshape(_bshape(r.variables, scope, g.cards))).sum())
        if r.counting_number:
            total += r.counting_number * _entropy(b)
    return total


def log_gbp_reparam_weight(rg: RegionGraph, beliefs, x) -> np.ndarray | float:
    """log prod_alpha b_alpha(x_alpha)^c_alpha for one or many states."""
    if isinstance(beliefs, GBPResult):
        beliefs = beliefs.beliefs
    x = np.asarray(x, dtype=int)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    total = np.zeros(xs.shape[0])
    for r in rg.regions:
        if r.counting_number:
            total += r.counting_number * np.log(beliefs[r.id][tuple(xs[:, v] for v in r.variables)])
    return float(total[0]) if single else total


def gbp_reparam_weight(rg: RegionGraph, beliefs, x):
    return np.exp(log_gbp_reparam_weight(rg, beliefs, x))
