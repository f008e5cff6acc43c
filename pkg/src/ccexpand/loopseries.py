"""Loop-series corrections to the Bethe estimate.

With calibrated beliefs, the reparameterised normaliser expands as

    Z_b = sum over factor subsets c of E_{b~}[prod_{f in c} U_f],
    U_f = b_f / prod_{i in f} b_i - 1,   b~(x) = prod_i b_i(x_i).

Terms vanish unless the subset's factor subgraph has no dangling factor,
so only generalized loops contribute.  Loops are gathered TLS-style: short
simple cycles first, then pairwise merges along short connecting paths.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .bp import BeliefSet, bethe_log_z
from .elimination import contract_many
from .exact import DEFAULT_WIDTH_CAP, sorted_table
from .model import Cluster, FactorGraph, core_scopes


@dataclass(frozen=True)
class GeneralizedLoop:
    cluster: Cluster
    discovery_index: int
    kind: str = "simple"  # "simple" or "merged"


@dataclass(frozen=True)
class TraceEntry:
    term: float
    estimate: float  # nan when flagged
    flagged: bool


@dataclass
class LoopSeriesTrace:
    bethe: float
    entries: list[TraceEntry]

    @property
    def estimate(self) -> float:
        """Final estimate; the Bethe value when there are no loops."""
        return self.entries[-1].estimate if self.entries else self.bethe

    @property
    def flagged(self) -> bool:
        return bool(self.entries) and self.entries[-1].flagged


def is_generalized_loop(g: FactorGraph, members: Iterable[int]) -> bool:
    """True when removing dangling trees keeps every factor."""
    members = list(members)
    kept = core_scopes({f: g.factors[f].scope for f in members})
    return len(kept) == len(members)


# ---------------------------------------------------------------------------
# enumeration


def _var_distances(g: FactorGraph) -> np.ndarray:
    """Hop distances between variables through shared factors."""
    n = g.n_variables
    nbrs = _var_neighbours(g)
    dist = np.full((n, n), n + 1, dtype=int)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w, _ in nbrs[u]:
                if dist[s, w] > dist[s, u] + 1:
                    dist[s, w] = dist[s, u] + 1
                    queue.append(w)
    return dist


def _var_neighbours(g: FactorGraph) -> list[list[tuple[int, int]]]:
    """For each variable, (neighbour, factor) steps in ascending order.

    Unary factors never lie on a cycle and are skipped.
    """
    out = []
    for u in range(g.n_variables):
        steps = set()
        for f in g.var_to_factors[u]:
            for w in g.factors[f].scope:
                if w != u:
                    steps.add((w, f))
        out.append(sorted(steps))
    return out


def simple_loops(g: FactorGraph, S: int) -> list[Cluster]:
    """Up to ``S`` simple cycles, shortest first.

    For each length, a depth-first search starts from every variable in
    ascending order, visits ascending neighbours, and keeps only cycles
    whose lowest variable is the start, once per orientation.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    nbrs = _var_neighbours(g)
    dist = _var_distances(g)
    found: list[Cluster] = []
    seen: set[frozenset] = set()
    n = g.n_variables
    for length in range(2, n + 1):
        for s in range(n):
            path_f: list[int] = []
            used_v = {s}

            def dfs(u: int, depth: int):
                # depth = factors on the path so far
                for w, f in nbrs[u]:
                    if f in path_f:
                        continue
                    if w == s:
                        if depth + 1 == length and path_f and path_f[0] < f:
                            key = frozenset(path_f + [f])
                            if key not in seen:
                                seen.add(key)
                                found.append(Cluster(tuple(key)))
                                if len(found) >= S:
                                    return True
                        continue
                    if w < s or w in used_v or depth + 1 >= length:
                        continue
                    if dist[w, s] > length - depth - 1:
                        continue
                    used_v.add(w)
                    path_f.append(f)
                    if dfs(w, depth + 1):
                        return True
                    path_f.pop()
                    used_v.discard(w)
                return False

            if dfs(s, 0):
                return found
    return found


def _bipartite_index(g: FactorGraph):
    """Node ids: variables 0..n-1, factors n..n+F-1; adjacency lists."""
    n = g.n_variables
    adj: list[list[int]] = [[] for _ in range(n + g.n_factors)]
    for f in g.factors:
        for v in f.scope:
            adj[v].append(n + f.id)
            adj[n + f.id].append(v)
    for a in adj:
        a.sort()
    return adj


def _loop_nodes(g: FactorGraph, c: Cluster) -> list[int]:
    n = g.n_variables
    return sorted(set(g.cluster_variables(c.members)) | {n + f for f in c.members})


def _bfs(adj, sources: Sequence[int], limit: int):
    n_nodes = len(adj)
    dist = np.full(n_nodes, limit + 1, dtype=int)
    parent = np.full(n_nodes, -1, dtype=int)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        if dist[u] >= limit:
            continue
        for w in adj[u]:
            if dist[w] > dist[u] + 1:
                dist[w] = dist[u] + 1
                parent[w] = u
                queue.append(w)
    return dist, parent


def enumerate_tls_loops(
    g: FactorGraph,
    S: int,
    M: int,
    max_loops: int | None = None,
) -> list[GeneralizedLoop]:
    """Simple loops followed by pairwise merges along shortest paths.

    Pairs (i, j), i < j, of simple loops joined by a path of at most ``M``
    bipartite edges are merged in order of path length, then (i, j).  The
    merged cluster adds the factors on one shortest path (its end in loop j
    is the lowest node id at minimum distance).  Clusters already emitted
    are skipped and ``max_loops`` caps the total output.
    """
    if M < 0:
        raise ValueError("M must be non-negative")
    simple = simple_loops(g, S)
    out: list[GeneralizedLoop] = []
    seen: set[frozenset] = set()

    def emit(c: Cluster, kind: str) -> bool:
        if c.frozen in seen or not is_generalized_loop(g, c.members):
            return False
        seen.add(c.frozen)
        out.append(GeneralizedLoop(c, len(out), kind))
        return max_loops is not None and len(out) >= max_loops

    for c in simple:
        if emit(c, "simple"):
            return out
    if len(simple) < 2:
        return out
    n = g.n_variables
    adj = _bipartite_index(g)
    nodes = [_loop_nodes(g, c) for c in simple]
    searches = [_bfs(adj, nd, M) for nd in nodes]
    dist = np.stack([d for d, _ in searches]).astype(np.int16)
    # gap[i, j]: path length between loops i and j
    gap = np.empty((len(simple), len(simple)), dtype=np.int16)
    for j, nj in enumerate(nodes):
        gap[:, j] = dist[:, nj].min(axis=1)
    upper = np.triu(np.ones(gap.shape, dtype=bool), 1)
    for d in range(M + 1):
        for i, j in zip(*np.nonzero((gap == d) & upper)):
            members = set(simple[i].members) | set(simple[j].members)
            nj = np.asarray(nodes[j])
            node = int(nj[np.argmin(dist[i, nj])])
            parent = searches[i][1]
            while parent[node] >= 0:
                node = int(parent[node])
                if node >= n and dist[i, node] > 0:
                    members.add(node - n)
            if emit(Cluster(tuple(members)), "merged"):
                return out
    return out


# ---------------------------------------------------------------------------
# terms


def _term_tables(g: FactorGraph, b: BeliefSet, members: Sequence[int]):
    tables = []
    for f in members:
        fac = g.factors[f]
        prod = np.ones(fac.table.shape)
        for ax, v in enumerate(fac.scope):
            shape = [1] * fac.arity
            shape[ax] = g.cards[v]
            prod = prod * b.var_beliefs[v].reshape(shape)
        tables.append(sorted_table(fac.scope, b.factor_beliefs[f] / prod - 1.0))
    for v in g.cluster_variables(members):
        tables.append(((v,), b.var_beliefs[v]))
    return tables


def loop_terms(
    g: FactorGraph,
    b: BeliefSet,
    clusters: Sequence[Cluster],
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> np.ndarray:
    """E_{b~}[prod_{f in c} U_f] for each cluster; exactly 0 off generalized loops."""
    out = np.zeros(len(clusters))
    live = [k for k, c in enumerate(clusters) if is_generalized_loop(g, c.members)]
    problems = [_term_tables(g, b, clusters[k].members) for k in live]
    if problems:
        out[live] = contract_many(problems, log=False, width_cap=width_cap)
    return out


def loop_term(
    g: FactorGraph,
    b: BeliefSet,
    c: Cluster,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> float:
    return float(loop_terms(g, b, [c], width_cap)[0])


def ls_estimate(
    g: FactorGraph,
    b: BeliefSet,
    loops: Sequence[GeneralizedLoop | Cluster],
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> LoopSeriesTrace:
    """Running bethe + log(1 + sum r) in discovery order."""
    clusters = [l.cluster if isinstance(l, GeneralizedLoop) else l for l in loops]
    bethe = bethe_log_z(g, b)
    terms = loop_terms(g, b, clusters, width_cap)
    entries = []
    running = 1.0
    for r in terms:
        running += float(r)
        if running > 0:
            entries.append(TraceEntry(float(r), bethe + math.log(running), False))
        else:
            entries.append(TraceEntry(float(r), math.nan, True))
    return LoopSeriesTrace(bethe, entries)
