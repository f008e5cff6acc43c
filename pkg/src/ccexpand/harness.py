"""Experiment runner: seeded instance batteries, method comparison and CSV output.

Methods:

* ``bethe``   IBP beliefs, Bethe free energy.
* ``ls-tls``  loop series over TLS loops.
* ``cce-tls`` cluster cumulant correction over the same TLS loops.
* ``cce-bp``  cluster cumulant correction on IBP beliefs (scheme per family).
* ``cce-gbp`` region cluster correction on GBP beliefs.

Every run is evaluated at its last iterate; runs that missed the tolerance
carry ``converged = False`` and are left out of the summary statistics.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .bp import BeliefSet, bethe_log_z, run_ibp
from .cce import DEFAULT_NODE_BUDGET, ClusterPoset, cce_estimate, cce_poset, cce_region_estimate, region_clusters_within
from .clusters import (
    clusters_for_scheme,
    complete_windows,
    enumerate_omega_all,
    grid_windows,
)
from .errors import CCEError
from .exact import DEFAULT_WIDTH_CAP, exact_log_z
from .loopseries import GeneralizedLoop, enumerate_tls_loops, ls_estimate
from .model import Cluster, FactorGraph, build_complete, build_grid, parse_uai
from .region import recipe_region_graph, run_gbp

METHODS = ("bethe", "ls-tls", "cce-tls", "cce-bp", "cce-gbp")

DEFAULT_SCHEMES = {"grid": "grid-faces:15", "complete": "complete-k:6", "uai": "omega-all:4"}
DEFAULT_RECIPES = {"grid": "faces", "complete": "star", "uai": "bethe"}
DEFAULT_TLS = {"grid": (1000, 10), "complete": (5000, 10), "uai": (100, 10)}


@dataclass
class ExperimentRecord:
    instance_id: str
    family: str
    sigma_i: float
    sigma_ij: float
    seed: int
    method: str
    n_terms: int
    log_z_estimate: float
    log_z_exact: float
    error: float
    converged: bool
    wall_time_ms: int
    note: str = ""


COLUMNS = [f.name for f in fields(ExperimentRecord)]


@dataclass
class RunOptions:
    """Solver and output settings shared by all instances of a battery.

    ``ls_S``/``ls_M`` of None take the family default.  ``damping``
    applies to IBP; the double-loop GBP solver is stable undamped and takes
    ``gbp_damping``.  ``clusters`` overrides the cluster scheme of ``cce-bp``.  ``wall_time_ms`` is only
    measured with ``timing`` so that repeated runs give identical files.
    """

    tol: float = 1e-8
    max_iters: int = 10000
    damping: float = 0.0
    gbp_damping: float = 0.0
    ls_S: int | None = None
    ls_M: int | None = None
    max_loops: int | None = 10000
    clusters: str | None = None
    closure: bool = True
    width_cap: int | None = DEFAULT_WIDTH_CAP
    budget: int | None = DEFAULT_NODE_BUDGET
    calibration_tol: float = 1e-6
    trace: bool = False
    timing: bool = False


@dataclass
class TracePoint:
    instance_id: str
    method: str
    k: int
    log_z_estimate: float
    log_z_exact: float
    error: float


TRACE_COLUMNS = [f.name for f in fields(TracePoint)]


@dataclass
class BatteryResult:
    records: list[ExperimentRecord]
    traces: list[TracePoint] = field(default_factory=list)

    def summary(self) -> list[dict]:
        return summarize(self.records)

    @property
    def all_failed(self) -> bool:
        by_inst: dict[str, bool] = {}
        for r in self.records:
            ok = r.method != "error" and math.isfinite(r.log_z_estimate)
            by_inst[r.instance_id] = by_inst.get(r.instance_id, False) or ok
        return bool(by_inst) and not any(by_inst.values())


# ---------------------------------------------------------------------------
# formatting


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(path: str | Path, rows: Sequence, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            get = r.get if isinstance(r, dict) else lambda c, r=r: getattr(r, c)
            w.writerow([_fmt(get(c)) for c in columns])


def read_records(path: str | Path) -> list[ExperimentRecord]:
    """Parse a battery CSV back into records."""
    types = {f.name: f.type for f in fields(ExperimentRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if t == "int":
                    kw[k] = int(v)
                elif t == "float":
                    kw[k] = float(v)
                elif t == "bool":
                    kw[k] = v == "1"
                else:
                    kw[k] = v
            out.append(ExperimentRecord(**kw))
    return out


def companion(path: str | Path, tag: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}-{tag}{p.suffix or '.csv'}")


SUMMARY_COLUMNS = ["family", "sigma_ij", "method", "n_runs", "n_used", "mean_error", "stderr_error"]


def summarize(records: Iterable[ExperimentRecord]) -> list[dict]:
    """Mean error and standard error per (family, sigma_ij, method).

    Only converged runs with a finite error enter the statistics;
    ``n_runs`` counts every run so the excluded share is visible.
    """
    groups: dict[tuple, list[ExperimentRecord]] = {}
    for r in records:
        if r.method == "error":
            continue
        groups.setdefault((r.family, r.sigma_ij, r.method), []).append(r)
    out = []
    for (family, sij, method), rs in groups.items():
        errs = np.array([r.error for r in rs if r.converged and math.isfinite(r.error)])
        mean = float(errs.mean()) if errs.size else math.nan
        se = float(errs.std(ddof=1) / math.sqrt(errs.size)) if errs.size > 1 else math.nan
        out.append(
            dict(family=family, sigma_ij=sij, method=method, n_runs=len(rs), n_used=int(errs.size), mean_error=mean, stderr_error=se)
        )
    return out


# ---------------------------------------------------------------------------
# per-instance evaluation


def _structure_key(g: FactorGraph):
    return g.cards, tuple(f.scope for f in g.factors)


def _checkpoints(n: int) -> list[int]:
    """1, 2, 5, 10, 20, 50, ... below n, then n."""
    ks, base = [], 1
    while base < n:
        for m in (1, 2, 5):
            if m * base < n:
                ks.append(m * base)
        base *= 10
    return ks + [n] if n else []


class Evaluator:
    """Runs the methods on instances, reusing structure-only work.

    TLS loops, cluster lists and CCE posets depend only on the graph
    structure, so instances of one battery share them.
    """

    def __init__(self, methods: Sequence[str], options: RunOptions | None = None):
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        self.methods = list(methods)
        self.opt = options or RunOptions()
        self._cache: dict = {}

    def _cached(self, key, make: Callable):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    # structure-level helpers

    def tls_loops(self, g: FactorGraph, family: str) -> list[GeneralizedLoop]:
        S0, M0 = DEFAULT_TLS[family]
        S = self.opt.ls_S or S0
        M = M0 if self.opt.ls_M is None else self.opt.ls_M
        key = ("tls", _structure_key(g), S, M, self.opt.max_loops)
        return self._cached(key, lambda: enumerate_tls_loops(g, S, M, self.opt.max_loops))

    def bp_clusters(self, g: FactorGraph, family: str) -> list[Cluster]:
        scheme = self.opt.clusters or DEFAULT_SCHEMES[family]
        if scheme == "tls":
            return [l.cluster for l in self.tls_loops(g, family)]
        key = ("clusters", _structure_key(g), scheme)
        return self._cached(key, lambda: clusters_for_scheme(g, scheme))

    def poset(self, g: FactorGraph, tag: str, clusters: Sequence[Cluster]) -> ClusterPoset:
        key = ("poset", _structure_key(g), tag, len(clusters), self.opt.closure)
        return self._cached(key, lambda: cce_poset(g, clusters, self.opt.closure, self.opt.budget))

    def region_windows(self, g: FactorGraph, family: str):
        if family == "grid":
            return grid_windows(g, 3)
        if family == "complete":
            return complete_windows(g, 4, min(6, g.n_variables), 0) if g.n_variables >= 4 else [tuple(range(g.n_variables))]
        key = ("windows", _structure_key(g))
        return self._cached(key, lambda: [g.cluster_variables(c.members) for c in enumerate_omega_all(g, 4)])

    # the methods

    def _ibp(self, g):
        return run_ibp(g, self.opt.tol, self.opt.max_iters, self.opt.damping)

    def _cce_trace(self, g, b, tag, clusters, exact, iid, method):
        points = []
        for k in _checkpoints(len(clusters)):
            prefix = clusters[:k]
            est = cce_estimate(g, b, prefix, poset=self.poset(g, tag, prefix), width_cap=self.opt.width_cap).estimate
            points.append(TracePoint(iid, method, k, est, exact, abs(exact - est)))
        return points

    def evaluate(self, g: FactorGraph, info: dict, exact: float) -> tuple[list[ExperimentRecord], list[TracePoint]]:
        """One record per method (and trace points when requested)."""
        family, iid = info["family"], info["instance_id"]
        records, traces = [], []
        ibp: tuple | None = None

        def beliefs():
            nonlocal ibp
            if ibp is None:
                b, _, conv = self._ibp(g)
                ibp = (b, conv)
            return ibp

        for method in self.methods:
            t0 = time.perf_counter()
            note = ""
            n_terms = 0
            try:
                if method == "cce-gbp":
                    est, conv, n_terms, note = self._run_gbp(g, family)
                else:
                    b, conv = beliefs()
                    est, n_terms, note, pts = self._run_bp_method(g, b, family, method, exact, iid)
                    traces.extend(pts)
            except (CCEError, FloatingPointError, ValueError) as exc:
                est, conv, note = math.nan, False, f"{type(exc).__name__}: {exc}"
            ms = int(round((time.perf_counter() - t0) * 1000)) if self.opt.timing else 0
            err = abs(exact - est) if math.isfinite(est) else math.nan
            records.append(
                ExperimentRecord(
                    iid, family, float(info["sigma_i"]), float(info["sigma_ij"]), int(info["seed"]),
                    method, int(n_terms), float(est), float(exact), float(err), bool(conv), ms, note,
                )
            )
        return records, traces

    def _run_bp_method(self, g, b: BeliefSet, family, method, exact, iid):
        pts: list[TracePoint] = []
        if method == "bethe":
            return bethe_log_z(g, b), 0, "", pts
        if method == "ls-tls":
            loops = self.tls_loops(g, family)
            tr = ls_estimate(g, b, loops, self.opt.width_cap)
            if self.opt.trace:
                for k, e in enumerate(tr.entries, 1):
                    pts.append(TracePoint(iid, method, k, e.estimate, exact, abs(exact - e.estimate)))
            note = "1 + sum of terms <= 0" if tr.flagged else ""
            return tr.estimate, len(loops), note, pts
        if method == "cce-tls":
            clusters = [l.cluster for l in self.tls_loops(g, family)]
            tag = "tls"
        else:
            clusters = self.bp_clusters(g, family)
            tag = self.opt.clusters or DEFAULT_SCHEMES[family]
        res = cce_estimate(g, b, clusters, poset=self.poset(g, tag, clusters), width_cap=self.opt.width_cap)
        if self.opt.trace:
            pts = self._cce_trace(g, b, tag, clusters, exact, iid, method)
        return res.estimate, len(clusters), "", pts

    def _run_gbp(self, g, family):
        rg = recipe_region_graph(g, DEFAULT_RECIPES[family])
        res = run_gbp(rg, self.opt.tol, self.opt.max_iters, self.opt.gbp_damping)
        rcs = region_clusters_within(rg, self.region_windows(g, family))
        # an uncalibrated run is still evaluated at its last iterate
        tol = self.opt.calibration_tol if res.converged else math.inf
        out = cce_region_estimate(rg, res, rcs, self.opt.closure, tol, self.opt.budget, self.opt.width_cap)
        note = "" if res.converged else f"gbp residual {res.residual:.3g}"
        return out.estimate, res.converged, len(rcs), note


def _error_record(info: dict, note: str) -> ExperimentRecord:
    return ExperimentRecord(
        info["instance_id"], info["family"], float(info["sigma_i"]), float(info["sigma_ij"]), int(info["seed"]),
        "error", 0, math.nan, math.nan, math.nan, False, 0, note,
    )


def run_instance(ev: Evaluator, g: FactorGraph, info: dict) -> tuple[list[ExperimentRecord], list[TracePoint]]:
    """Solve exactly, then run every method; a failed exact solve gives one error row."""
    try:
        exact = exact_log_z(g, ev.opt.width_cap)
    except CCEError as exc:
        return [_error_record(info, f"exact: {type(exc).__name__}: {exc}")], []
    return ev.evaluate(g, info, exact)


def _write_outputs(result: BatteryResult, out_path, options: RunOptions) -> None:
    if out_path is None:
        return
    write_csv(out_path, result.records, COLUMNS)
    write_csv(companion(out_path, "summary"), result.summary(), SUMMARY_COLUMNS)
    if options.trace:
        write_csv(companion(out_path, "trace"), result.traces, TRACE_COLUMNS)


def _seed_list(n_seeds) -> list[int]:
    if isinstance(n_seeds, int):
        return list(range(n_seeds))
    return [int(s) for s in n_seeds]


def _run_battery(make, family, sigma_i, sigma_ij_list, n_seeds, methods, out_path, options, progress=None):
    options = options or RunOptions()
    ev = Evaluator(methods, options)
    result = BatteryResult([])
    for sij in sigma_ij_list:
        for seed in _seed_list(n_seeds):
            g, iid = make(sij, seed)
            info = dict(instance_id=iid, family=family, sigma_i=sigma_i, sigma_ij=sij, seed=seed)
            recs, pts = run_instance(ev, g, info)
            result.records.extend(recs)
            result.traces.extend(pts)
            if progress:
                progress(recs)
    _write_outputs(result, out_path, options)
    return result


def run_grid_battery(
    rows: int,
    cols: int,
    sigma_i: float,
    sigma_ij_list: Sequence[float],
    n_seeds,
    methods: Sequence[str],
    out_path=None,
    options: RunOptions | None = None,
    progress=None,
) -> BatteryResult:
    """Grid instances for every (sigma_ij, seed); ``n_seeds`` is a count or a seed list."""

    def make(sij, seed):
        return build_grid(rows, cols, sigma_i, sij, seed), f"grid{rows}x{cols}-sij{sij:g}-seed{seed}"

    return _run_battery(make, "grid", sigma_i, sigma_ij_list, n_seeds, methods, out_path, options, progress)


def run_complete_battery(
    n: int,
    sigma_i: float,
    sigma_ij_list: Sequence[float],
    n_seeds,
    methods: Sequence[str],
    out_path=None,
    options: RunOptions | None = None,
    progress=None,
) -> BatteryResult:
    """Complete-graph instances with K_3..K_6 clusters (star regions for GBP)."""

    def make(sij, seed):
        return build_complete(n, sigma_i, sij, seed), f"complete{n}-sij{sij:g}-seed{seed}"

    return _run_battery(make, "complete", sigma_i, sigma_ij_list, n_seeds, methods, out_path, options, progress)


def run_uai(
    file_paths: Sequence[str | Path],
    methods: Sequence[str],
    S: int | None = None,
    M: int | None = None,
    out_path=None,
    options: RunOptions | None = None,
    progress=None,
) -> BatteryResult:
    """Each file is parsed and solved; unreadable or too-wide instances yield an error row."""
    options = options or RunOptions()
    if S is not None:
        options.ls_S = S
    if M is not None:
        options.ls_M = M
    ev = Evaluator(methods, options)
    result = BatteryResult([])
    for path in file_paths:
        info = dict(instance_id=Path(path).name, family="uai", sigma_i=math.nan, sigma_ij=math.nan, seed=0)
        try:
            g = parse_uai(Path(path).read_text())
        except (OSError, CCEError) as exc:
            recs, pts = [_error_record(info, f"read: {type(exc).__name__}: {exc}")], []
        else:
            recs, pts = run_instance(ev, g, info)
        result.records.extend(recs)
        result.traces.extend(pts)
        if progress:
            progress(recs)
    _write_outputs(result, out_path, options)
    return result
