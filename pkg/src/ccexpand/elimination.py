"""Variable elimination over small dense tables, optionally batched.

A *table list* is a sequence of ``(scope, array)`` pairs where ``scope`` is a
sorted tuple of variable ids and the array axes follow that order.  Tables
can live in the log domain (combined by addition, reduced by log-sum-exp) or
the linear domain (product / sum, signed values allowed).

Many cluster evaluations share the same structure up to a relabelling
(translated faces of a grid, the K_k subgraphs of a complete graph).
:func:`contract_many` groups such evaluations and runs one batched
elimination per group.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError


def min_fill(
    scopes: Iterable[Sequence[int]],
    variables: Iterable[int] | None = None,
    keep: Iterable[int] = (),
) -> tuple[list[int], int]:
    """Greedy min-fill order (ties to the lowest id) and its induced width.

    Variables in ``keep`` are never eliminated but still shape the
    interaction graph.
    """
    adj: dict[int, set[int]] = {}
    for s in scopes:
        for v in s:
            adj.setdefault(v, set()).update(s)
    for v in variables or ():
        adj.setdefault(v, set())
    for v, nb in adj.items():
        nb.discard(v)
    keep = set(keep)

    def fill(v):
        nb = list(adj[v])
        missing = 0
        for i, a in enumerate(nb):
            na = adj[a]
            for b in nb[i + 1:]:
                if b not in na:
                    missing += 1
        return missing

    score = {v: fill(v) for v in adj if v not in keep}
    order: list[int] = []
    width = 0
    while score:
        v = min(score, key=lambda u: (score[u], u))
        nb = adj.pop(v)
        del score[v]
        width = max(width, len(nb))
        touched = set(nb)
        for a in nb:
            adj[a].discard(v)
            new = nb - adj[a] - {a}
            if new:
                adj[a].update(new)
        for a in nb:
            touched.update(adj[a])
        for u in touched:
            if u in score:
                score[u] = fill(u)
        order.append(v)
    return order, width


@dataclass(frozen=True)
class _Step:
    inputs: tuple[int, ...]            # slots consumed
    shapes: tuple[tuple[int, ...], ...]  # broadcast shape for each input (without batch)
    axis: int                           # axis of the eliminated variable in the union (without batch)
    out_slot: int
    size: int                           # cardinality of the eliminated variable


@dataclass(frozen=True)
class Plan:
    """A fixed elimination schedule for one table-list structure."""

    steps: tuple[_Step, ...]
    final_inputs: tuple[int, ...]
    final_shapes: tuple[tuple[int, ...], ...]
    keep: tuple[int, ...]
    keep_shape: tuple[int, ...]
    width: int
    order: tuple[int, ...]


@lru_cache(maxsize=4096)
def make_plan(
    scopes: tuple[tuple[int, ...], ...],
    cards: tuple[tuple[int, int], ...],
    keep: tuple[int, ...] = (),
) -> Plan:
    """Plan for tables with the given scopes.

    ``cards`` lists ``(variable, cardinality)`` pairs for every variable to
    be summed, including ones no table mentions.
    """
    card = dict(cards)
    keep = tuple(sorted(keep))
    order, width = min_fill(scopes, card.keys(), keep)
    live: dict[int, tuple[int, ...]] = {k: s for k, s in enumerate(scopes)}
    next_slot = len(scopes)
    steps = []
    for v in order:
        bucket = [k for k, s in live.items() if v in s]
        union = tuple(sorted({u for k in bucket for u in live[k]} | {v}))
        shapes = tuple(tuple(card[u] if u in live[k] else 1 for u in union) for k in bucket)
        for k in bucket:
            del live[k]
        out = tuple(u for u in union if u != v)
        steps.append(_Step(tuple(bucket), shapes, union.index(v), next_slot, card[v]))
        live[next_slot] = out
        next_slot += 1
    final = tuple(live)
    final_shapes = tuple(tuple(card[u] if u in live[k] else 1 for u in keep) for k in final)
    return Plan(
        tuple(steps),
        final,
        final_shapes,
        keep,
        tuple(card[u] for u in keep),
        width,
        tuple(order),
    )


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def run_plan(plan: Plan, arrays: Sequence[np.ndarray], log: bool, batch: int | None = None) -> np.ndarray:
    """Execute ``plan``.  With ``batch`` set every array carries a leading batch axis."""
    slots = dict(enumerate(arrays))
    lead = () if batch is None else (batch,)
    off = 0 if batch is None else 1
    for step in plan.steps:
        acc = None
        for k, shape in zip(step.inputs, step.shapes):
            t = slots.pop(k).reshape(lead + shape)
            if acc is None:
                acc = t
            elif log:
                acc = acc + t
            else:
                acc = acc * t
        if acc is None:
            acc = np.zeros(lead + (step.size,)) if log else np.ones(lead + (step.size,))
        slots[step.out_slot] = _lse(acc, step.axis + off) if log else acc.sum(axis=step.axis + off)
    result = np.zeros(lead + plan.keep_shape) if log else np.ones(lead + plan.keep_shape)
    for k, shape in zip(plan.final_inputs, plan.final_shapes):
        t = slots.pop(k).reshape(lead + shape)
        result = result + t if log else result * t
    return result


def contract(
    tables: Sequence[tuple[Sequence[int], np.ndarray]],
    cards: dict[int, int],
    log: bool = True,
    keep: Sequence[int] = (),
    width_cap: int | None = None,
) -> np.ndarray | float:
    """Sum out every variable of ``cards`` not in ``keep``.

    Returns a scalar (log-partition or signed sum) when ``keep`` is empty,
    otherwise a table over ``sorted(keep)``.
    """
    scopes = tuple(tuple(s) for s, _ in tables)
    plan = make_plan(scopes, tuple(sorted(cards.items())), tuple(keep))
    if width_cap is not None and plan.width > width_cap:
        raise CapacityError(f"induced width {plan.width} exceeds cap {width_cap}")
    out = run_plan(plan, [np.asarray(t, dtype=float) for _, t in tables], log)
    return float(out) if not plan.keep else out


def _signature(tables: Sequence[tuple[Sequence[int], np.ndarray]]):
    variables = sorted({v for s, _ in tables for v in s})
    local = {v: k for k, v in enumerate(variables)}
    items = sorted(
        ((tuple(local[v] for v in s), k) for k, (s, _) in enumerate(tables)),
        key=lambda p: p[0],
    )
    scopes = tuple(p[0] for p in items)
    perm = tuple(p[1] for p in items)
    shapes = tuple(tables[k][1].shape for k in perm)
    return scopes, shapes, perm, variables


def contract_many(
    problems: Sequence[Sequence[tuple[Sequence[int], np.ndarray]]],
    log: bool = True,
    width_cap: int | None = None,
) -> np.ndarray:
    """Scalar contraction of many table lists, batching identical structures.

    Every variable of a problem must appear in at least one of its tables.
    """
    out = np.empty(len(problems))
    groups: dict[tuple, list[int]] = {}
    perms: list[tuple[int, ...]] = []
    for idx, tables in enumerate(problems):
        if not tables:
            out[idx] = 0.0 if log else 1.0
            perms.append(())
            continue
        scopes, shapes, perm, _ = _signature(tables)
        perms.append(perm)
        groups.setdefault((scopes, shapes), []).append(idx)
    for (scopes, shapes), members in groups.items():
        cards = {}
        for s, shp in zip(scopes, shapes):
            cards.update(zip(s, shp))
        plan = make_plan(scopes, tuple(sorted(cards.items())))
        if width_cap is not None and plan.width > width_cap:
            raise CapacityError(f"induced width {plan.width} exceeds cap {width_cap}")
        arrays = [
            np.stack([np.asarray(problems[i][perms[i][slot]][1], dtype=float) for i in members])
            for slot in range(len(scopes))
        ]
        out[members] = run_plan(plan, arrays, log, batch=len(members))
    return out
