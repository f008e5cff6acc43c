"""Discrete factor graphs, synthetic generators and UAI-format I/O.

Tables are stored in the linear domain as numpy arrays whose axes follow the
factor's scope order (row-major over the scope, last variable fastest).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError

UAI_FLOOR = 1e-12


@dataclass(frozen=True)
class Variable:
    id: int
    cardinality: int


@dataclass(frozen=True, eq=False)
class Factor:
    id: int
    scope: tuple[int, ...]
    table: np.ndarray

    @property
    def arity(self) -> int:
        return len(self.scope)


@dataclass(frozen=True)
class Cluster:
    """Canonical set of factor (or region) ids; identity is the sorted tuple."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        if not members:
            raise ValueError("a cluster needs at least one member")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, members: Iterable[int]) -> "Cluster":
        return cls(tuple(members))

    @cached_property
    def frozen(self) -> frozenset[int]:
        return frozenset(self.members)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    def __contains__(self, item):
        return item in self.frozen

    def __le__(self, other: "Cluster") -> bool:
        return self.frozen <= other.frozen

    def __lt__(self, other: "Cluster") -> bool:
        return self.frozen < other.frozen

    def __and__(self, other: "Cluster") -> frozenset[int]:
        return self.frozen & other.frozen

    def __repr__(self):
        return f"Cluster{self.members}"


class FactorGraph:
    """Variables with finite alphabets and strictly positive factor tables.

    ``parent_variables`` / ``parent_factors`` map local ids back to the graph
    this one was extracted from (identity for a root graph).  ``meta`` carries
    generator information (family, grid dimensions, ...).
    """

    def __init__(
        self,
        cardinalities: Sequence[int],
        factors: Sequence[tuple[Sequence[int], np.ndarray]],
        meta: Mapping | None = None,
        parent_variables: Sequence[int] | None = None,
        parent_factors: Sequence[int] | None = None,
    ):
        cards = tuple(int(c) for c in cardinalities)
        if any(c < 2 for c in cards):
            raise DomainError("every variable needs cardinality >= 2")
        built = []
        for fid, (scope, table) in enumerate(factors):
            scope = tuple(int(v) for v in scope)
            if len(set(scope)) != len(scope):
                raise DomainError(f"factor {fid} repeats a variable in its scope")
            if any(v < 0 or v >= len(cards) for v in scope):
                raise DomainError(f"factor {fid} refers to an unknown variable")
            shape = tuple(cards[v] for v in scope)
            table = np.array(table, dtype=float).reshape(shape)
            if not np.all(np.isfinite(table)) or np.any(table <= 0):
                raise DomainError(f"factor {fid} has non-positive or non-finite entries")
            table.setflags(write=False)
            built.append(Factor(fid, scope, table))
        self.cards = cards
        self.factors: tuple[Factor, ...] = tuple(built)
        adj: list[list[int]] = [[] for _ in cards]
        for f in self.factors:
            for v in f.scope:
                adj[v].append(f.id)
        if any(not a for a in adj):
            missing = [i for i, a in enumerate(adj) if not a]
            raise DomainError(f"variables {missing[:5]} appear in no factor")
        self.var_to_factors: tuple[tuple[int, ...], ...] = tuple(tuple(a) for a in adj)
        self.meta = dict(meta or {})
        self.parent_variables = tuple(parent_variables) if parent_variables is not None else tuple(range(len(cards)))
        self.parent_factors = (
            tuple(parent_factors) if parent_factors is not None else tuple(range(len(self.factors)))
        )

    @property
    def n_variables(self) -> int:
        return len(self.cards)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def variables(self) -> list[Variable]:
        return [Variable(i, c) for i, c in enumerate(self.cards)]

    def degree(self, var: int) -> int:
        return len(self.var_to_factors[var])

    def scopes(self) -> list[tuple[int, ...]]:
        return [f.scope for f in self.factors]

    @cached_property
    def scope_index(self) -> dict[frozenset, int]:
        """Lowest factor id for every distinct scope (as a set)."""
        index: dict[frozenset, int] = {}
        for f in self.factors:
            index.setdefault(frozenset(f.scope), f.id)
        return index

    def cluster_variables(self, members: Iterable[int]) -> tuple[int, ...]:
        vs = set()
        for fid in members:
            vs.update(self.factors[fid].scope)
        return tuple(sorted(vs))

    def log_psi(self, x) -> np.ndarray | float:
        """log prod_f psi_f(x_f) for one state (n,) or a batch of states (N, n)."""
        x = np.asarray(x, dtype=int)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        total = np.zeros(xs.shape[0])
        for f in self.factors:
            total += np.log(f.table[tuple(xs[:, v] for v in f.scope)])
        return float(total[0]) if single else total

    def __repr__(self):
        return f"FactorGraph(n_variables={self.n_variables}, n_factors={self.n_factors})"


# ---------------------------------------------------------------------------
# generators


def _pair_table(w: float) -> np.ndarray:
    return np.array([[math.exp(w), math.exp(-w)], [math.exp(-w), math.exp(w)]])


def grid_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    """Grid edges in draw order: sites row-major, right neighbour then down."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            if c + 1 < cols:
                edges.append((s, s + 1))
            if r + 1 < rows:
                edges.append((s, s + cols))
    return edges


def _ising(n: int, pairs: list[tuple[int, int]], sigma_i: float, sigma_ij: float, seed: int, meta: dict):
    if sigma_i < 0 or sigma_ij < 0:
        raise ValueError("standard deviations must be non-negative")
    rng = np.random.default_rng(seed)
    h = sigma_i * rng.standard_normal(n)
    w = sigma_ij * rng.standard_normal(len(pairs))
    factors = [((i,), np.array([math.exp(h[i]), math.exp(-h[i])])) for i in range(n)]
    factors += [((a, b), _pair_table(w[k])) for k, (a, b) in enumerate(pairs)]
    meta = dict(meta, sigma_i=sigma_i, sigma_ij=sigma_ij, seed=seed)
    return FactorGraph([2] * n, factors, meta=meta)


def build_grid(rows: int, cols: int, sigma_i: float, sigma_ij: float, seed: int) -> FactorGraph:
    """Binary grid with Normal random fields and couplings.

    Factor ids: unary factors 0..n-1 by site ``r * cols + c``, then one
    pairwise factor per edge in :func:`grid_edges` order.  Draws come from a
    PCG64 stream seeded with ``seed``: all fields by site, then all couplings
    by edge (``numpy.random.Generator.standard_normal``).
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    meta = {"family": "grid", "rows": rows, "cols": cols}
    return _ising(rows * cols, grid_edges(rows, cols), sigma_i, sigma_ij, seed, meta)


def build_complete(n: int, sigma_i: float, sigma_ij: float, seed: int) -> FactorGraph:
    """Binary model over the complete graph K_n; pairs drawn in lexicographic order."""
    if n < 2:
        raise ValueError("a complete graph needs at least two variables")
    meta = {"family": "complete", "n": n}
    return _ising(n, list(combinations(range(n), 2)), sigma_i, sigma_ij, seed, meta)


def build_random_tree(n: int, seed: int, max_card: int = 4, scale: float = 1.0) -> FactorGraph:
    """Random tree over ``n`` variables with cardinalities in 2..max_card.

    Variable ``k > 0`` attaches to a uniformly drawn earlier variable; every
    variable has a unary factor.  Log-table entries are ``scale`` times
    standard Normal draws.
    """
    if n < 1:
        raise ValueError("a tree needs at least one variable")
    rng = np.random.default_rng(seed)
    cards = [int(c) for c in rng.integers(2, max_card + 1, size=n)]
    factors = [((i,), np.exp(scale * rng.standard_normal(cards[i]))) for i in range(n)]
    for k in range(1, n):
        p = int(rng.integers(0, k))
        factors.append(((p, k), np.exp(scale * rng.standard_normal((cards[p], cards[k])))))
    return FactorGraph(cards, factors, meta={"family": "tree", "seed": seed})


# ---------------------------------------------------------------------------
# UAI format


def _tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            yield tok, lineno


class _TokenStream:
    def __init__(self, text: str):
        self._it = _tokens(text)
        self.line = None

    def next(self, what: str) -> str:
        try:
            tok, self.line = next(self._it)
        except StopIteration:
            raise ParseError(f"expected {what}", None) from None
        return tok

    def int(self, what: str) -> int:
        tok = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise ParseError(f"expected integer {what}, got {tok!r}", self.line) from None

    def float(self, what: str) -> float:
        tok = self.next(what)
        try:
            return float(tok)
        except ValueError:
            raise ParseError(f"expected number {what}, got {tok!r}", self.line) from None

    def rest(self):
        return list(self._it)


def parse_uai(text: str | bytes, floor_zeros: bool = False) -> FactorGraph:
    """Read a UAI ``MARKOV``/``BAYES`` model.

    Zero entries raise :class:`DomainError` unless ``floor_zeros`` is set, in
    which case they are replaced by ``UAI_FLOOR``.  Variables that appear in
    no factor receive a unit unary factor so the model's semantics are kept.
    """
    if isinstance(text, bytes):
        text = text.decode()
    ts = _TokenStream(text)
    kind = ts.next("preamble")
    if kind.upper() not in ("MARKOV", "BAYES"):
        raise ParseError(f"unknown model type {kind!r}", ts.line)
    n = ts.int("variable count")
    if n < 1:
        raise ParseError("variable count must be positive", ts.line)
    cards = [ts.int("cardinality") for _ in range(n)]
    for c in cards:
        if c < 2:
            raise ParseError("cardinalities must be >= 2", ts.line)
    m = ts.int("factor count")
    scopes = []
    for _ in range(m):
        k = ts.int("scope size")
        scope = []
        for _ in range(k):
            v = ts.int("scope variable")
            if v < 0 or v >= n:
                raise ParseError(f"scope cites undeclared variable {v}", ts.line)
            scope.append(v)
        if len(set(scope)) != len(scope):
            raise ParseError("scope repeats a variable", ts.line)
        scopes.append(tuple(scope))
    factors = []
    for scope in scopes:
        count = ts.int("table size")
        expected = math.prod(cards[v] for v in scope)
        if count != expected:
            raise ParseError(f"table size {count} does not match scope ({expected})", ts.line)
        vals = np.array([ts.float("table entry") for _ in range(count)])
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise DomainError(f"negative or non-finite table entry near line {ts.line}")
        if np.any(vals == 0):
            if not floor_zeros:
                raise DomainError(f"zero table entry near line {ts.line} (use the floor option)")
            vals = np.where(vals == 0, UAI_FLOOR, vals)
        factors.append((scope, vals))
    extra = ts.rest()
    if extra:
        raise ParseError(f"unexpected trailing token {extra[0][0]!r}", extra[0][1])
    covered = {v for s in scopes for v in s}
    for v in range(n):
        if v not in covered:
            factors.append(((v,), np.ones(cards[v])))
    return FactorGraph(cards, factors, meta={"family": "uai"})


def serialize_uai(g: FactorGraph) -> str:
    out = io.StringIO()
    out.write("MARKOV\n")
    out.write(f"{g.n_variables}\n")
    out.write(" ".join(str(c) for c in g.cards) + "\n")
    out.write(f"{g.n_factors}\n")
    for f in g.factors:
        out.write(" ".join(str(x) for x in (f.arity, *f.scope)) + "\n")
    for f in g.factors:
        out.write(f"\n{f.table.size}\n")
        out.write(" ".join(format(v, ".17g") for v in f.table.ravel()) + "\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# subgraphs


def factor_subgraph(g: FactorGraph, cluster: Cluster | Iterable[int]) -> FactorGraph:
    """The factors of ``cluster`` together with every variable they touch."""
    members = cluster.members if isinstance(cluster, Cluster) else tuple(sorted(set(cluster)))
    variables = g.cluster_variables(members)
    local = {v: k for k, v in enumerate(variables)}
    factors = [(tuple(local[v] for v in g.factors[f].scope), g.factors[f].table) for f in members]
    return FactorGraph(
        [g.cards[v] for v in variables],
        factors,
        meta={"family": "subgraph"},
        parent_variables=[g.parent_variables[v] for v in variables],
        parent_factors=[g.parent_factors[f] for f in members],
    )


def core_scopes(scopes: Mapping[int, Sequence[int]]) -> dict[int, tuple[int, ...]]:
    """2-core of a bipartite factor graph given as ``{factor: scope}``.

    Returns the surviving factors mapped to their surviving variables.  A
    variable touched by a single factor is removed from that factor's scope;
    a factor left with at most one variable is removed.
    """
    live = {f: set(s) for f, s in scopes.items()}
    touching: dict[int, set[int]] = {}
    for f, s in live.items():
        for v in s:
            touching.setdefault(v, set()).add(f)
    dead_f = [f for f, s in live.items() if len(s) <= 1]
    leaves = [v for v, fs in touching.items() if len(fs) == 1]
    while dead_f or leaves:
        while dead_f:
            f = dead_f.pop()
            if f not in live:
                continue
            for v in live.pop(f):
                fs = touching[v]
                fs.discard(f)
                if len(fs) == 1:
                    leaves.append(v)
        while leaves:
            v = leaves.pop()
            fs = touching.get(v)
            if not fs or len(fs) != 1:
                continue
            (f,) = fs
            fs.clear()
            live[f].discard(v)
            if len(live[f]) <= 1:
                dead_f.append(f)
    order = {f: tuple(scopes[f]) for f in live}
    return {f: tuple(v for v in order[f] if v in live[f]) for f in sorted(live)}


def core(g: FactorGraph) -> FactorGraph:
    """Remove dangling trees; an empty graph is returned for forests.

    Surviving factors keep only their surviving variables; their tables are
    summed over the removed ones.
    """
    kept = core_scopes({f.id: f.scope for f in g.factors})
    variables = sorted({v for s in kept.values() for v in s})
    local = {v: k for k, v in enumerate(variables)}
    factors = []
    for fid, scope in kept.items():
        f = g.factors[fid]
        drop = tuple(ax for ax, v in enumerate(f.scope) if v not in scope)
        table = f.table.sum(axis=drop) if drop else f.table
        factors.append((tuple(local[v] for v in scope), table))
    return FactorGraph(
        [g.cards[v] for v in variables],
        factors,
        meta={"family": "core"},
        parent_variables=[g.parent_variables[v] for v in variables],
        parent_factors=[g.parent_factors[f] for f in kept],
    )


def _components(n_vars: int, scopes: Iterable[Sequence[int]]) -> tuple[int, int]:
    """(number of bipartite components, number of bipartite edges)."""
    parent = list(range(n_vars))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = n_vars
    edges = 0
    for s in scopes:
        edges += len(s)
        roots = {find(v) for v in s}
        comps -= len(roots) - 1
        if roots:
            it = iter(roots)
            r0 = next(it)
            for r in it:
                parent[r] = r0
        else:
            comps += 1  # isolated factor node
    return comps, edges


def is_connected(g: FactorGraph) -> bool:
    if g.n_variables == 0:
        return False
    comps, _ = _components(g.n_variables, g.scopes())
    return comps == 1


def is_tree(g: FactorGraph) -> bool:
    if g.n_variables == 0:
        return False
    comps, edges = _components(g.n_variables, g.scopes())
    return comps == 1 and edges == g.n_variables + g.n_factors - 1


def is_forest_scopes(scopes: Iterable[Sequence[int]]) -> bool:
    """True when the bipartite graph spanned by these scopes has no cycle."""
    index: dict[int, int] = {}
    parent: list[int] = []

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s in scopes:
        roots = set()
        for v in s:
            k = index.get(v)
            if k is None:
                k = index[v] = len(parent)
                parent.append(k)
            r = find(k)
            if r in roots:
                return False
            roots.add(r)
        it = iter(roots)
        r0 = next(it, None)
        for r in it:
            parent[r] = r0
    return True


@dataclass
class GridGeometry:
    rows: int
    cols: int
    edge_factor: dict[tuple[int, int], int] = field(repr=False)

    def site(self, r: int, c: int) -> int:
        return r * self.cols + c

    def face_factors(self, r: int, c: int) -> tuple[int, ...]:
        """Pairwise factor ids of the unit face with top-left corner (r, c)."""
        a, b = self.site(r, c), self.site(r, c + 1)
        d, e = self.site(r + 1, c), self.site(r + 1, c + 1)
        return tuple(sorted(self.edge_factor[p] for p in ((a, b), (d, e), (a, d), (b, e))))

    def faces(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.rows - 1) for c in range(self.cols - 1)]


def grid_geometry(g: FactorGraph) -> GridGeometry:
    if g.meta.get("family") != "grid":
        raise ValueError("graph was not produced by build_grid")
    rows, cols = g.meta["rows"], g.meta["cols"]
    edge_factor = {}
    for a, b in grid_edges(rows, cols):
        edge_factor[(a, b)] = g.scope_index[frozenset((a, b))]
    return GridGeometry(rows, cols, edge_factor)
