"""Cluster-cumulant expansion of the log normaliser around BP or GBP.

A cluster is a set of factors (or calibrated regions).  Its partial log
partition function ``log Z_a`` is the log normaliser of the reparameterised
model restricted to the cluster.  Cumulants are defined on the inclusion
poset by ``log Z_a = sum_{b <= a} C_b``; truncating the poset and summing
cumulants regroups into ``sum_b kappa_b log Z_b`` with integer ``kappa``.

Posets store ancestor and descendant sets as Python int bitsets, built
once per poset from a member -> containing-nodes index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .bp import BeliefSet, bethe_log_z
from .elimination import contract_many
from .errors import CapacityError, PreconditionError
from .exact import DEFAULT_WIDTH_CAP, sorted_table
from .loopseries import simple_loops
from .model import Cluster, FactorGraph, core_scopes
from .region import GBPResult, RegionGraph, gbp_log_z, gbp_residual

DEFAULT_NODE_BUDGET = 200_000


def _bits(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


# ---------------------------------------------------------------------------
# posets


@dataclass
class ClusterPoset:
    """Inclusion poset over distinct clusters.

    ``ancestors[k]`` / ``descendants[k]`` are bitsets of strict supersets /
    subsets.  ``children`` / ``parents`` are the Hasse covers.  ``levels``
    count the longest chain from the bottom (bottom nodes are level 1).
    ``n_inputs`` leading nodes are the clusters that were supplied; the rest
    were added by closure.
    """

    nodes: list[Cluster]
    ancestors: list[int] = field(repr=False)
    descendants: list[int] = field(repr=False)
    children: list[tuple[int, ...]] = field(repr=False)
    parents: list[tuple[int, ...]] = field(repr=False)
    levels: list[int] = field(repr=False)
    n_inputs: int = 0
    _kappa: list[int] | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.nodes)

    @property
    def kappa(self) -> list[int]:
        if self._kappa is None:
            self._kappa = kappa_numbers(self)
        return self._kappa

    def index(self, c: Cluster | Iterable[int]) -> int:
        key = c.frozen if isinstance(c, Cluster) else frozenset(c)
        for k, node in enumerate(self.nodes):
            if node.frozen == key:
                return k
        raise KeyError(c)

    def ancestors_of(self, k: int) -> list[int]:
        return _bits(self.ancestors[k])

    def descendants_of(self, k: int) -> list[int]:
        return _bits(self.descendants[k])

    @property
    def maximal(self) -> list[int]:
        return [k for k, a in enumerate(self.ancestors) if not a]

    @property
    def hasse_edges(self) -> list[tuple[int, int]]:
        """(parent, child) covering pairs."""
        return [(p, k) for k, ps in enumerate(self.parents) for p in ps]

    def is_closed(self) -> bool:
        keys = {c.frozen for c in self.nodes}
        for i in range(len(self.nodes)):
            for j in range(i):
                inter = self.nodes[i].frozen & self.nodes[j].frozen
                if inter and inter not in keys:
                    return False
        return True


def build_poset(clusters: Sequence[Cluster], n_inputs: int | None = None) -> ClusterPoset:
    """Poset over ``clusters`` (distinct) without adding intersections."""
    nodes = list(clusters)
    keys = {c.frozen for c in nodes}
    if len(keys) != len(nodes):
        raise ValueError("clusters must be distinct")
    contain: dict[int, int] = {}
    for k, c in enumerate(nodes):
        for m in c.members:
            contain[m] = contain.get(m, 0) | (1 << k)
    ancestors = []
    for k, c in enumerate(nodes):
        mask = -1
        for m in c.members:
            mask &= contain[m]
        ancestors.append(mask & ~(1 << k))
    descendants = [0] * len(nodes)
    for k, a in enumerate(ancestors):
        for p in _bits(a):
            descendants[p] |= 1 << k
    children = []
    for k, d in enumerate(descendants):
        below = 0
        for j in _bits(d):
            below |= descendants[j]
        children.append(tuple(_bits(d & ~below)))
    parents: list[list[int]] = [[] for _ in nodes]
    for k, ch in enumerate(children):
        for j in ch:
            parents[j].append(k)
    levels = [0] * len(nodes)
    for k in sorted(range(len(nodes)), key=lambda k: len(nodes[k])):
        levels[k] = 1 + max((levels[j] for j in children[k]), default=0)
    return ClusterPoset(
        nodes,
        ancestors,
        descendants,
        children,
        [tuple(p) for p in parents],
        levels,
        len(nodes) if n_inputs is None else n_inputs,
    )


def _dedupe(clusters: Iterable[Cluster | Iterable[int]]) -> list[Cluster]:
    out, seen = [], set()
    for c in clusters:
        c = c if isinstance(c, Cluster) else Cluster.of(c)
        if c.frozen not in seen:
            seen.add(c.frozen)
            out.append(c)
    return out


def _masks(sets: Sequence[Iterable[int]], width: int) -> np.ndarray:
    out = np.zeros((len(sets), width), dtype=np.uint64)
    for k, members in enumerate(sets):
        for m in members:
            out[k, m >> 6] |= np.uint64(1) << np.uint64(m & 63)
    return out


def _unpack(rows: np.ndarray, size: int) -> np.ndarray:
    bits = np.unpackbits(rows.view(np.uint8), axis=1, bitorder="little")
    return bits[:, :size].astype(bool)


def _pack(bits: np.ndarray, width: int) -> np.ndarray:
    padded = np.zeros((bits.shape[0], width * 64), dtype=bool)
    padded[:, : bits.shape[1]] = bits
    return np.packbits(padded, axis=1, bitorder="little").view(np.uint64)


def _members(row: np.ndarray) -> tuple[int, ...]:
    bits = np.unpackbits(row.view(np.uint8), bitorder="little")
    return tuple(int(i) for i in np.flatnonzero(bits))


_MIX = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9, 0xD6E8FEB86659FD93], dtype=np.uint64)


def _unique_rows(rows: np.ndarray) -> np.ndarray:
    """Distinct rows of a uint64 matrix (hash first, exact fallback)."""
    if rows.shape[1] == 1:
        return np.unique(rows[:, 0])[:, None]
    mix = np.resize(_MIX, rows.shape[1]) | np.uint64(1)
    h = (rows * mix).sum(axis=1) ^ (rows[:, 0] >> np.uint64(29))
    _, first, inverse = np.unique(h, return_index=True, return_inverse=True)
    if np.array_equal(rows[first[inverse]], rows):
        return rows[first]
    return np.unique(rows, axis=0)


def close_poset(
    clusters: Sequence[Cluster | Iterable[int]],
    budget: int | None = DEFAULT_NODE_BUDGET,
    reduce: Callable[[frozenset], frozenset] | None = None,
) -> ClusterPoset:
    """Add intersections until the node set is closed.

    Every intersection of several inputs is some node met with one more
    input, so each node is only intersected with the inputs (as packed
    bitsets, distinct results only).  With ``reduce`` the meet of two nodes
    is ``reduce(a & b)`` and inputs are reduced too; empty results are
    discarded.  ``reduce`` must be monotone, idempotent and satisfy
    reduce(a & reduce(b)) = reduce(a & b), as the dangling-tree core does.
    """
    if reduce is None:
        nodes = _dedupe(clusters)
    else:
        nodes = []
        for c in clusters:
            r = reduce(c.frozen if isinstance(c, Cluster) else frozenset(c))
            if r:
                nodes.append(Cluster(tuple(r)))
        nodes = _dedupe(nodes)
    n_inputs = len(nodes)
    if n_inputs < 2:
        return build_poset(nodes, n_inputs)
    # a reduced meet is empty below this size
    smallest = 1 if reduce is None else getattr(reduce, "smallest", 2)
    batch = getattr(reduce, "batch", None)
    width = max(c.members[-1] for c in nodes) // 64 + 1
    inputs = _masks([c.members for c in nodes], width)
    masks = list(inputs)
    holders: dict[int, list[int]] = {}
    for k, c in enumerate(nodes):
        for m in c.members:
            holders.setdefault(m, []).append(k)
    holders_arr = {m: np.array(v) for m, v in holders.items()}
    keys = {row.tobytes() for row in inputs}
    seen: set[bytes] = set(keys)

    def add(members: tuple[int, ...], row: np.ndarray):
        keys.add(row.tobytes())
        nodes.append(Cluster(members))
        masks.append(row)
        if budget is not None and len(nodes) > budget:
            raise CapacityError(f"poset closure exceeded the node budget ({len(nodes)} > {budget})")

    x = 0
    while x < len(nodes):
        near = np.unique(np.concatenate([holders_arr[m] for m in nodes[x].members]))
        inter = inputs[near] & masks[x]
        count = np.bitwise_count(inter).sum(axis=1)
        pick = (count >= smallest) & (count < len(nodes[x]))
        x += 1
        if not pick.any():
            continue
        rows = _unique_rows(inter[pick])
        fresh = []
        for row in rows:
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                fresh.append(row)
        if not fresh:
            continue
        if batch is not None:
            cols = list(nodes[x - 1].members)
            live = np.zeros((len(fresh), reduce.size), dtype=bool)
            live[:, cols] = batch(_unpack(np.array(fresh), reduce.size)[:, cols], cols)
            reduced = _pack(live, width)
            for row in _unique_rows(reduced):
                key = row.tobytes()
                if key not in keys and row.any():
                    seen.add(key)
                    add(_members(row), row)
            continue
        for row in fresh:
            members = _members(row)
            if reduce is not None:
                members = tuple(sorted(reduce(frozenset(members))))
                if not members:
                    continue
                row = _masks([members], width)[0]
                if row.tobytes() in keys:
                    continue
                seen.add(row.tobytes())
            add(members, row)
    return build_poset(nodes, n_inputs)


def kappa_numbers(poset: ClusterPoset) -> list[int]:
    """kappa = 1 on maximal nodes, else 1 - sum of kappa over all ancestors."""
    kappa = [0] * len(poset)
    for k in sorted(range(len(poset)), key=lambda k: -len(poset.nodes[k])):
        kappa[k] = 1 - sum(kappa[a] for a in _bits(poset.ancestors[k]))
    return kappa


def cumulants(poset: ClusterPoset, log_zs: Sequence[float]) -> np.ndarray:
    """C_a = log Z_a - sum of C over all strict descendants, bottom-up."""
    C = np.zeros(len(poset))
    for k in sorted(range(len(poset)), key=lambda k: len(poset.nodes[k])):
        C[k] = log_zs[k] - sum(C[j] for j in _bits(poset.descendants[k]))
    return C


def mobius_matrix(poset: ClusterPoset) -> np.ndarray:
    """Dense Mobius numbers mu[b, a] (zero unless b <= a)."""
    n = len(poset)
    mu = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        mu[a, a] = 1
        below = sorted(_bits(poset.descendants[a]), key=lambda k: -len(poset.nodes[k]))
        for g_ in below:
            # nodes strictly between g_ and a, plus a itself
            between = [b for b in _bits(poset.ancestors[g_]) if b == a or (poset.descendants[a] >> b) & 1]
            mu[g_, a] = -sum(mu[b, a] for b in between)
    return mu


# ---------------------------------------------------------------------------
# factor clusters


def _ratio_table(g: FactorGraph, b: BeliefSet, f: int, scope: tuple[int, ...]):
    """log of b_f marginalised onto ``scope`` over prod_{i in scope} b_i."""
    full = g.factors[f].scope
    keep_set = set(scope)
    drop = tuple(ax for ax, v in enumerate(full) if v not in keep_set)
    bf = b.factor_beliefs[f]
    if drop:
        bf = bf.sum(axis=drop)
    sub = tuple(v for v in full if v in keep_set)
    t = np.log(bf)
    for ax, v in enumerate(sub):
        shape = [1] * len(sub)
        shape[ax] = g.cards[v]
        t = t - b.log_var(v).reshape(shape)
    return sorted_table(sub, t)


def _cluster_tables(g: FactorGraph, b: BeliefSet, members: Sequence[int], prune: bool, memo: dict):
    scopes = {f: g.factors[f].scope for f in members}
    kept = core_scopes(scopes) if prune else scopes
    tables = []
    variables = set()
    for f, scope in kept.items():
        key = (f, scope)
        if key not in memo:
            memo[key] = _ratio_table(g, b, f, scope)
        tables.append(memo[key])
        variables.update(scope)
    for v in sorted(variables):
        tables.append(((v,), b.log_var(v)))
    return tables


def partial_log_zs(
    g: FactorGraph,
    b: BeliefSet,
    clusters: Sequence[Cluster],
    width_cap: int | None = DEFAULT_WIDTH_CAP,
    prune: bool = True,
) -> np.ndarray:
    """Batched :func:`partial_log_z`."""
    memo: dict = {}
    problems = [_cluster_tables(g, b, c.members, prune, memo) for c in clusters]
    return contract_many(problems, log=True, width_cap=width_cap)


def partial_log_z(
    g: FactorGraph,
    b: BeliefSet,
    c: Cluster,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
    prune: bool = True,
) -> float:
    """log sum_x prod_{i in V_c} b_i prod_{f in c} b_f / prod_{i in f} b_i.

    With ``prune`` the dangling trees are summed out analytically first:
    a removed leaf variable is marginalised out of its factor belief and a
    factor left hanging contributes 1.
    """
    return float(partial_log_zs(g, b, [c], width_cap, prune)[0])


class CoreReducer:
    """Map a factor set to the factors that survive dangling-tree removal.

    ``batch`` peels a boolean (sets x factors) matrix over the factor
    columns ``cols`` at once: variables in fewer than two live factors and
    factors with fewer than two live variables are dropped until nothing
    changes.  ``smallest`` is the factor count of the shortest cycle; no
    smaller set has a non-empty core.
    """

    def __init__(self, g: FactorGraph):
        self.g = g
        self.size = g.n_factors
        inc = np.zeros((g.n_factors, g.n_variables))
        for f in g.factors:
            inc[f.id, list(f.scope)] = 1.0
        self.incidence = inc
        shortest = simple_loops(g, 1) if g.n_factors else []
        self.smallest = len(shortest[0]) if shortest else g.n_factors + 1

    def __call__(self, members: frozenset) -> frozenset:
        return frozenset(core_scopes({f: self.g.factors[f].scope for f in members}))

    def batch(self, live: np.ndarray, cols: Sequence[int]) -> np.ndarray:
        live = live.astype(float)
        inc = self.incidence[cols]
        inc = inc[:, inc.any(axis=0)]
        while True:
            var_live = ((live @ inc) >= 2).astype(float)
            keep = live * ((var_live @ inc.T) >= 2)
            if np.array_equal(keep, live):
                return live > 0
            live = keep


def core_reducer(g: FactorGraph) -> CoreReducer:
    return CoreReducer(g)


@dataclass
class CCEResult:
    """Truncated expansion over a poset.

    ``correction`` is sum kappa log Z; ``naive`` is the plain sum of log Z
    over the maximal nodes, reported for comparison.  ``estimate`` adds the
    base (Bethe or region free energy) estimate.
    """

    correction: float
    naive: float
    base: float
    poset: ClusterPoset
    log_z: np.ndarray
    cumulant: np.ndarray
    kappa: list[int]

    @property
    def estimate(self) -> float:
        return self.base + self.correction

    def trace(self) -> list[dict]:
        return [
            {
                "node": k,
                "members": " ".join(map(str, c.members)),
                "level": self.poset.levels[k],
                "input": k < self.poset.n_inputs,
                "kappa": self.kappa[k],
                "log_z": float(self.log_z[k]),
                "cumulant": float(self.cumulant[k]),
            }
            for k, c in enumerate(self.poset.nodes)
        ]


def _assemble(poset: ClusterPoset, log_z: np.ndarray, base: float) -> CCEResult:
    kappa = poset.kappa
    C = cumulants(poset, log_z)
    correction = float(sum(k * z for k, z in zip(kappa, log_z) if k))
    naive = float(sum(log_z[k] for k in poset.maximal))
    return CCEResult(correction, naive, base, poset, log_z, C, kappa)


def cce_poset(
    g: FactorGraph,
    clusters: Sequence[Cluster | Iterable[int]],
    close: bool = True,
    budget: int | None = DEFAULT_NODE_BUDGET,
    prune: bool = True,
) -> ClusterPoset:
    if close:
        return close_poset(clusters, budget, core_reducer(g) if prune else None)
    return build_poset(_dedupe(clusters))


def cce_estimate(
    g: FactorGraph,
    b: BeliefSet,
    clusters: Sequence[Cluster | Iterable[int]],
    close: bool = True,
    budget: int | None = DEFAULT_NODE_BUDGET,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
    prune: bool = True,
    poset: ClusterPoset | None = None,
) -> CCEResult:
    """Bethe estimate plus the truncated cumulant correction.

    With ``close`` the poset is completed under intersection.  With
    ``prune`` as well, clusters are replaced by their cores and closed
    under the core of the intersection: log Z of a cluster equals that of
    its core, and the kappa-weighted sum over this smaller poset equals
    the one over the plain intersection closure.  The poset depends only on
    the graph structure and ``clusters``; pass a prebuilt one from
    :func:`cce_poset` to reuse it across beliefs.
    """
    if poset is None:
        poset = cce_poset(g, clusters, close, budget, prune)
    log_z = partial_log_zs(g, b, poset.nodes, width_cap, prune) if len(poset) else np.zeros(0)
    return _assemble(poset, log_z, bethe_log_z(g, b))


# ---------------------------------------------------------------------------
# region clusters


@dataclass(frozen=True)
class RegionCluster:
    """A set of calibrated regions with counting numbers local to the set."""

    members: Cluster
    counting: dict = field(hash=False, compare=False)

    @property
    def retained(self) -> list[int]:
        return [r for r in self.members if self.counting[r] != 0]


def region_cluster(rg: RegionGraph, members: Iterable[int]) -> RegionCluster:
    """Local counting numbers c_b = 1 - sum over ancestors of b inside the set."""
    c = Cluster.of(members)
    inside = c.frozen
    counting: dict[int, int] = {}
    for r in sorted(c.members, key=lambda r: -len(rg.regions[r].variables)):
        counting[r] = 1 - sum(counting[a] for a in rg.ancestors[r] if a in inside)
    return RegionCluster(c, counting)


def region_clusters_within(rg: RegionGraph, windows: Iterable[Iterable[int]]) -> list[RegionCluster]:
    """One cluster per variable window: every region inside the window."""
    out, seen = [], set()
    for w in windows:
        members = rg.regions_within(w)
        if members and members not in seen:
            seen.add(members)
            out.append(region_cluster(rg, members))
    return out


def _region_beliefs(beliefs) -> Sequence[np.ndarray]:
    return beliefs.beliefs if isinstance(beliefs, GBPResult) else beliefs


def check_calibrated(rg: RegionGraph, beliefs, tol: float) -> float:
    residual = gbp_residual(rg, _region_beliefs(beliefs))
    if not residual < tol:
        raise PreconditionError(f"region graph is not calibrated (residual {residual:.3g} >= {tol:.3g})")
    return residual


def _region_tables(rg: RegionGraph, beliefs, rc: RegionCluster):
    tables = []
    for r in rc.retained:
        region = rg.regions[r]
        tables.append((region.variables, rc.counting[r] * np.log(beliefs[r])))
    return tables


def region_partial_log_zs(
    rg: RegionGraph,
    beliefs,
    clusters: Sequence[RegionCluster],
    tol: float = 1e-6,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> np.ndarray:
    check_calibrated(rg, beliefs, tol)
    beliefs = _region_beliefs(beliefs)
    problems = [_region_tables(rg, beliefs, rc) for rc in clusters]
    return contract_many(problems, log=True, width_cap=width_cap)


def region_partial_log_z(
    rg: RegionGraph,
    beliefs,
    c: RegionCluster,
    tol: float = 1e-6,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> float:
    """log sum_x prod_b b_b^{c_b} over the regions of ``c`` with c_b != 0."""
    return float(region_partial_log_zs(rg, beliefs, [c], tol, width_cap)[0])


def cce_region_estimate(
    rg: RegionGraph,
    beliefs,
    clusters: Sequence[RegionCluster],
    close: bool = True,
    tol: float = 1e-6,
    budget: int | None = DEFAULT_NODE_BUDGET,
    width_cap: int | None = DEFAULT_WIDTH_CAP,
) -> CCEResult:
    """Region free-energy estimate plus the cumulant correction.

    The poset orders region sets by inclusion; local counting numbers of
    closure nodes are derived from the region graph as for inputs.
    """
    check_calibrated(rg, beliefs, tol)
    base = gbp_log_z(rg, _region_beliefs(beliefs))
    sets = [rc.members for rc in clusters]
    poset = close_poset(sets, budget) if close else build_poset(_dedupe(sets))
    given = {rc.members.frozen: rc for rc in clusters}
    rcs = [given.get(c.frozen) or region_cluster(rg, c.members) for c in poset.nodes]
    log_z = region_partial_log_zs(rg, beliefs, rcs, tol, width_cap) if rcs else np.zeros(0)
    return _assemble(poset, log_z, base)
