"""Cluster enumeration schemes and their command-line selectors.

Selectors: ``omega-all:<level>``, ``grid-faces:<level>``,
``complete-k:<kmax>``, ``tls`` and ``custom:<file>``.  A level ``l`` admits
clusters of at most ``l + 1`` factors.
"""

from __future__ import annotations

from itertools import combinations
from pathlib import Path
from typing import Iterable

from .errors import CapacityError, ParseError
from .loopseries import is_generalized_loop
from .model import Cluster, FactorGraph, grid_geometry

DEFAULT_CLUSTER_BUDGET = 100_000


def _king_neighbours(face, rows, cols):
    r, c = face
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if (dr or dc) and 0 <= r + dr < rows and 0 <= c + dc < cols:
                yield (r + dr, c + dc)


def enumerate_grid_clusters(g: FactorGraph, level: int, max_faces: int = 4) -> list[Cluster]:
    """Unions of 1..max_faces faces connected through shared vertices or edges.

    Clusters come in order of face count, then the sorted face tuple;
    unions above ``level + 1`` factors are skipped and each union is
    emitted once.
    """
    geo = grid_geometry(g)
    rows, cols = geo.rows - 1, geo.cols - 1
    faces = geo.faces()
    out: list[Cluster] = []
    seen: set[frozenset] = set()
    frontier = [frozenset([f]) for f in faces]
    for _ in range(max_faces):
        for fs in sorted(frontier, key=sorted):
            members = Cluster(tuple(m for f in fs for m in geo.face_factors(*f)))
            if len(members) <= level + 1 and members.frozen not in seen:
                seen.add(members.frozen)
                out.append(members)
        grown = set()
        for fs in frontier:
            for f in fs:
                for nb in _king_neighbours(f, rows, cols):
                    if nb not in fs:
                        grown.add(fs | {nb})
        frontier = list(grown)
    return out


def enumerate_complete_clusters(
    g: FactorGraph,
    k_max: int,
    through_vertex: int | None = None,
    k_min: int = 3,
) -> list[Cluster]:
    """Pairwise-factor clusters of the K_k vertex subsets, k_min <= k <= k_max."""
    if not 3 <= k_min <= k_max <= 6:
        raise ValueError("need 3 <= k_min <= k_max <= 6")
    out = []
    for verts in complete_windows(g, k_min, k_max, through_vertex):
        members = [g.scope_index[frozenset(p)] for p in combinations(verts, 2) if frozenset(p) in g.scope_index]
        if members:
            out.append(Cluster(tuple(members)))
    return out


def complete_windows(g: FactorGraph, k_min: int, k_max: int, through_vertex: int | None = None):
    """Vertex subsets in increasing size, then lexicographic order."""
    n = g.n_variables
    out = []
    for k in range(k_min, k_max + 1):
        if through_vertex is None:
            out.extend(combinations(range(n), k))
        else:
            rest = [v for v in range(n) if v != through_vertex]
            out.extend(tuple(sorted((through_vertex,) + c)) for c in combinations(rest, k - 1))
    return out


def grid_windows(g: FactorGraph, size: int = 3) -> list[tuple[int, ...]]:
    """Variables of every ``size`` x ``size`` block of sites, row-major."""
    geo = grid_geometry(g)
    out = []
    for r in range(geo.rows - size + 1):
        for c in range(geo.cols - size + 1):
            out.append(tuple(geo.site(r + i, c + j) for i in range(size) for j in range(size)))
    return out


def enumerate_omega_all(
    g: FactorGraph,
    level: int,
    budget: int | None = DEFAULT_CLUSTER_BUDGET,
) -> list[Cluster]:
    """Connected factor sets of at most ``level + 1`` factors with no dangling tree.

    Every other subset has a vanishing cumulant, so these carry the whole
    truncated series.  Unary factors never qualify and are ignored.
    Connected sets are grown ESU-style (each set once, from its lowest
    factor); output is ordered by size, then members.
    """
    size_cap = level + 1
    cand = [f.id for f in g.factors if f.arity >= 2]
    nbrs: dict[int, set[int]] = {f: set() for f in cand}
    for f in cand:
        for v in g.factors[f].scope:
            nbrs[f].update(h for h in g.var_to_factors[v] if h != f and g.factors[h].arity >= 2)
    found: list[tuple[int, ...]] = []
    visited = 0

    def extend(sub: list[int], ext: set[int], root: int, hood: set[int]):
        nonlocal visited
        visited += 1
        if budget is not None and visited > 10 * budget:
            raise CapacityError(f"omega-all enumeration exceeded {10 * budget} connected sets")
        if len(sub) >= 2 and is_generalized_loop(g, sub):
            found.append(tuple(sorted(sub)))
            if budget is not None and len(found) > budget:
                raise CapacityError(f"omega-all enumeration exceeded {budget} clusters")
        if len(sub) == size_cap:
            return
        ext = set(ext)
        while ext:
            w = min(ext)
            ext.discard(w)
            new_ext = ext | {u for u in nbrs[w] if u > root and u not in hood and u not in sub}
            extend(sub + [w], new_ext, root, hood | nbrs[w] | {w})

    for f in cand:
        extend([f], {u for u in nbrs[f] if u > f}, f, nbrs[f] | {f})
    found.sort(key=lambda t: (len(t), t))
    return [Cluster(t) for t in found]


def read_custom_clusters(path: str | Path) -> list[Cluster]:
    """One cluster per line, whitespace-separated factor ids; ``#`` starts a comment."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append(Cluster(tuple(int(t) for t in line.split())))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out


SCHEMES = ("omega-all", "grid-faces", "complete-k", "tls", "custom")


def parse_scheme(text: str) -> tuple[str, str | None]:
    name, _, arg = text.partition(":")
    if name not in SCHEMES:
        raise ValueError(f"unknown cluster scheme {name!r}; choose from {SCHEMES}")
    if name in ("omega-all", "grid-faces", "complete-k"):
        if not arg.isdigit():
            raise ValueError(f"scheme {name} needs an integer argument, e.g. {name}:4")
    elif name == "custom" and not arg:
        raise ValueError("scheme custom needs a file, e.g. custom:clusters.txt")
    return name, arg or None


def clusters_for_scheme(g: FactorGraph, text: str, loops: Iterable | None = None) -> list[Cluster]:
    """Clusters of a selector; ``tls`` takes the already enumerated loops."""
    name, arg = parse_scheme(text)
    if name == "omega-all":
        return enumerate_omega_all(g, int(arg))
    if name == "grid-faces":
        return enumerate_grid_clusters(g, int(arg))
    if name == "complete-k":
        return enumerate_complete_clusters(g, int(arg))
    if name == "custom":
        clusters = read_custom_clusters(arg)
        for c in clusters:
            if c.members[-1] >= g.n_factors:
                raise ParseError(f"cluster {c.members} names an unknown factor")
        return clusters
    if loops is None:
        raise ValueError("scheme tls needs enumerated loops")
    return [l.cluster for l in loops]
