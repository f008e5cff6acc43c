"""Command-line entry point (``ccexpand``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import METHODS, RunOptions, run_complete_battery, run_grid_battery, run_uai
from .model import build_complete, build_grid, serialize_uai

log = logging.getLogger("ccexpand")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _seeds(text: str):
    """``25`` (seeds 0..24), ``3-7`` (inclusive) or ``1,4,9``."""
    if "," in text:
        return [int(t) for t in text.split(",") if t]
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return int(text)


def _width_cap(text: str):
    return None if text.lower() in ("none", "inf") else int(text)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", action="append", choices=METHODS, help="repeatable; default: all methods")
    p.add_argument("--clusters", help="cluster scheme for cce-bp (omega-all:L, grid-faces:L, complete-k:K, tls, custom:FILE)")
    p.add_argument("--ls-S", type=int, help="number of simple loops for TLS")
    p.add_argument("--ls-M", type=int, help="merge path length for TLS")
    p.add_argument("--max-loops", type=int, default=10000, help="cap on TLS loops (0 for none)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--damping", type=float, default=0.0, help="IBP message damping")
    p.add_argument("--gbp-damping", type=float, default=0.0)
    p.add_argument("--out", required=True, help="CSV path; -summary and -trace companions go alongside")
    p.add_argument("--trace", action="store_true", help="write anytime traces")
    p.add_argument("--timing", action="store_true", help="record wall times (otherwise 0)")
    p.add_argument("--no-closure", action="store_true", help="skip the intersection closure")
    p.add_argument("--width-cap", type=_width_cap, default=20)


def _options(a) -> RunOptions:
    return RunOptions(
        tol=a.tol,
        max_iters=a.max_iters,
        damping=a.damping,
        gbp_damping=a.gbp_damping,
        ls_S=a.ls_S,
        ls_M=a.ls_M,
        max_loops=a.max_loops or None,
        clusters=a.clusters,
        closure=not a.no_closure,
        width_cap=a.width_cap,
        trace=a.trace,
        timing=a.timing,
    )


def _progress(recs):
    for r in recs:
        log.info("%s %-8s err=%.3g conv=%s %s", r.instance_id, r.method, r.error, r.converged, r.note)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccexpand", description="Cluster cumulant expansion experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-grid", help="write a random grid model in UAI format")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--sigma-i", type=float, default=0.1)
    p.add_argument("--sigma-ij", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-complete", help="write a random complete-graph model in UAI format")
    p.add_argument("--n", type=int, default=15)
    p.add_argument("--sigma-i", type=float, default=0.1)
    p.add_argument("--sigma-ij", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run-grid", help="grid battery")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--sigma-i", type=float, default=0.1)
    p.add_argument("--sigma-ij", type=_floats, default=_floats("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"))
    p.add_argument("--seeds", type=_seeds, default=25)
    _add_run_flags(p)

    p = sub.add_parser("run-complete", help="complete-graph battery")
    p.add_argument("--n", type=int, default=15)
    p.add_argument("--sigma-i", type=float, default=0.1)
    p.add_argument("--sigma-ij", type=_floats, default=_floats("0.1,0.2,0.3,0.4,0.5"))
    p.add_argument("--seeds", type=_seeds, default=25)
    _add_run_flags(p)

    p = sub.add_parser("run-uai", help="run methods on UAI files")
    p.add_argument("files", nargs="+")
    _add_run_flags(p)

    p = sub.add_parser("selftest", help="run the invariant checks")
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")

    if a.verb == "gen-grid":
        Path(a.out).write_text(serialize_uai(build_grid(a.rows, a.cols, a.sigma_i, a.sigma_ij, a.seed)))
        return 0
    if a.verb == "gen-complete":
        Path(a.out).write_text(serialize_uai(build_complete(a.n, a.sigma_i, a.sigma_ij, a.seed)))
        return 0
    if a.verb == "selftest":
        from .selftest import run_selftest

        return 0 if run_selftest(a.seed) else 1

    methods = a.method or list(METHODS)
    opt = _options(a)
    if a.verb == "run-grid":
        res = run_grid_battery(a.rows, a.cols, a.sigma_i, a.sigma_ij, a.seeds, methods, a.out, opt, _progress)
    elif a.verb == "run-complete":
        res = run_complete_battery(a.n, a.sigma_i, a.sigma_ij, a.seeds, methods, a.out, opt, _progress)
    else:
        res = run_uai(a.files, methods, a.ls_S, a.ls_M, a.out, opt, _progress)
        if res.all_failed:
            print("all instances failed", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
