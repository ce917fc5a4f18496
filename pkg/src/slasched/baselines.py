"""Greedy first-fit comparators: FFD, FFI and Pack9.

Queries are taken in a fixed order and each goes onto the first existing VM
where it adds no penalty; otherwise a new VM of the first type (by id) that
supports it is provisioned.  For average and percentile goals "adds no
penalty" means the schedule's current penalty does not increase.
"""

from __future__ import annotations

from typing import Sequence

from .core import (
    EPS,
    PerformanceGoal,
    Query,
    Schedule,
    TemplateCatalog,
    VM,
    ValidationError,
    effective_latency,
    penalty_accumulator,
)


def _sort_key(catalog: TemplateCatalog):
    def key(q: Query):
        return (catalog.min_latency(q.template_id) + q.extra_wait, q.instance_id)
    return key


def first_fit(order: Sequence[Query], catalog: TemplateCatalog, goal: PerformanceGoal) -> Schedule:
    acc = penalty_accumulator(goal, catalog, len(order))
    vms: list[tuple[int, list[Query]]] = []
    busy: list[float] = []
    for q in order:
        target = None
        for j, (vt, queue) in enumerate(vms):
            if not catalog.supports(vt, q.template_id):
                continue
            f = busy[j] + effective_latency(q, vt, catalog)
            if acc.delta(f, q.template_id) <= EPS:
                target = j
                break
        if target is None:
            vt = next((v.id for v in catalog.vm_types if q.template_id in v.supports), None)
            if vt is None:
                raise ValidationError(f"template {q.template_id} cannot run on any VM type")
            vms.append((vt, []))
            busy.append(0.0)
            target = len(vms) - 1
        vt, queue = vms[target]
        busy[target] += effective_latency(q, vt, catalog)
        queue.append(q)
        acc.add(busy[target], q.template_id)
    return Schedule(tuple(VM(t, tuple(qs)) for t, qs in vms))


def ffd(workload: Sequence[Query], catalog: TemplateCatalog, goal: PerformanceGoal) -> Schedule:
    key = _sort_key(catalog)
    order = sorted(workload, key=lambda q: (-key(q)[0], q.instance_id))
    return first_fit(order, catalog, goal)


def ffi(workload: Sequence[Query], catalog: TemplateCatalog, goal: PerformanceGoal) -> Schedule:
    return first_fit(sorted(workload, key=_sort_key(catalog)), catalog, goal)


def pack9_order(workload: Sequence[Query], catalog: TemplateCatalog) -> list[Query]:
    rest = sorted(workload, key=_sort_key(catalog))
    out = []
    lo, hi = 0, len(rest)
    while hi - lo >= 10:
        out += rest[lo:lo + 9]
        lo += 9
        hi -= 1
        out.append(rest[hi])
    # fewer than ten left: increasing order, as FFI would take them
    out += rest[lo:hi]
    return out


def pack9(workload: Sequence[Query], catalog: TemplateCatalog, goal: PerformanceGoal) -> Schedule:
    return first_fit(pack9_order(workload, catalog), catalog, goal)


BASELINES = {"ffd": ffd, "ffi": ffi, "pack9": pack9}
