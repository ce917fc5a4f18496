"""Domain types, completion times, penalty functions and the total cost model.

All money is in dollars and all times are in seconds.  Rent rates are stored
per second; configuration files quote them per hour and are converted once at
load time (see :mod:`slasched.config`).
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

# Money/time comparisons below this are treated as equal.
EPS = 1e-9


class ValidationError(ValueError):
    """A schedule, workload or goal is inconsistent with its catalog."""


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VMType:
    id: int
    startup_cost: float
    rent_rate: float
    supports: frozenset

    def __post_init__(self):
        object.__setattr__(self, "supports", frozenset(self.supports))
        if self.startup_cost < 0:
            raise ValidationError(f"VM type {self.id}: negative startup cost")
        if self.rent_rate <= 0:
            raise ValidationError(f"VM type {self.id}: rent rate must be positive")
        if not self.supports:
            raise ValidationError(f"VM type {self.id}: supports no templates")


@dataclass(frozen=True, eq=False)
class QueryTemplate:
    """A query class.  ``base`` is set on templates synthesised for online
    scheduling, whose latency already includes the time spent waiting."""

    id: int
    latency: Mapping[int, float]
    deadline: float | None = None
    base: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "latency", dict(self.latency))
        for vm, l in self.latency.items():
            if not l > 0:
                raise ValidationError(f"template {self.id}: latency on VM type {vm} must be > 0")

    @property
    def base_id(self) -> int:
        return self.id if self.base is None else self.base


class TemplateCatalog:
    """The workload specification: query templates plus the VM types that can
    run them."""

    def __init__(self, vm_types: Iterable[VMType], templates: Iterable[QueryTemplate]):
        self.vm_types = tuple(sorted(vm_types, key=lambda v: v.id))
        self.templates = tuple(sorted(templates, key=lambda t: t.id))
        if not self.templates:
            raise ValidationError("catalog has no templates")
        if not self.vm_types:
            raise ValidationError("catalog has no VM types")
        self._vm = {v.id: v for v in self.vm_types}
        self._tpl = {t.id: t for t in self.templates}
        if len(self._vm) != len(self.vm_types) or len(self._tpl) != len(self.templates):
            raise ValidationError("duplicate ids in catalog")
        self.template_index = {t.id: i for i, t in enumerate(self.templates)}
        self.vm_index = {v.id: i for i, v in enumerate(self.vm_types)}
        for v in self.vm_types:
            for tid in v.supports:
                if tid not in self._tpl:
                    continue
                if v.id not in self._tpl[tid].latency:
                    raise ValidationError(f"template {tid} has no latency on VM type {v.id}")
        for t in self.templates:
            if not any(t.id in v.supports for v in self.vm_types):
                raise ValidationError(f"template {t.id} is not supported by any VM type")

    def template(self, tid: int) -> QueryTemplate:
        try:
            return self._tpl[tid]
        except KeyError:
            raise ValidationError(f"unknown template {tid}") from None

    def vm_type(self, vid: int) -> VMType:
        try:
            return self._vm[vid]
        except KeyError:
            raise ValidationError(f"unknown VM type {vid}") from None

    def supports(self, vid: int, tid: int) -> bool:
        return tid in self.vm_type(vid).supports

    def latency(self, tid: int, vid: int) -> float:
        if not self.supports(vid, tid):
            raise ValidationError(f"VM type {vid} does not support template {tid}")
        return self.template(tid).latency[vid]

    def min_latency(self, tid: int) -> float:
        return min(self.latency(tid, v.id) for v in self.vm_types if self.supports(v.id, tid))

    def min_processing_cost(self, tid: int) -> float:
        return min(v.rent_rate * self.latency(tid, v.id)
                   for v in self.vm_types if self.supports(v.id, tid))

    @property
    def template_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.templates)

    def with_templates(self, extra: Iterable[QueryTemplate]) -> "TemplateCatalog":
        """Catalog with extra templates, which every VM type that supports the
        extra template's base also supports."""
        extra = list(extra)
        vms = []
        for v in self.vm_types:
            add = {t.id for t in extra if t.base_id in v.supports}
            vms.append(replace(v, supports=v.supports | add))
        return TemplateCatalog(vms, list(self.templates) + extra)

    def to_dict(self) -> dict:
        return {
            "vm_types": [
                {"id": v.id, "startup_cost_usd": v.startup_cost,
                 "rent_usd_per_hour": v.rent_rate * 3600.0, "supports": sorted(v.supports)}
                for v in self.vm_types
            ],
            "templates": [
                {"id": t.id, "latency_s_by_vmtype": {str(k): t.latency[k] for k in sorted(t.latency)},
                 **({"deadline_s": t.deadline} if t.deadline is not None else {}),
                 **({"base": t.base} if t.base is not None else {})}
                for t in self.templates
            ],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __repr__(self):
        return f"TemplateCatalog(vm_types={len(self.vm_types)}, templates={self.template_ids})"


# ---------------------------------------------------------------------------
# Workloads and schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    template_id: int
    instance_id: int
    arrival_time: float = 0.0
    extra_wait: float = 0.0

    def __post_init__(self):
        if self.extra_wait < 0:
            raise ValidationError(f"query {self.instance_id}: negative extra wait")


def make_workload(template_ids: Iterable[int], start_id: int = 1) -> list[Query]:
    return [Query(t, i) for i, t in enumerate(template_ids, start=start_id)]


def template_counts(workload: Iterable[Query]) -> dict[int, int]:
    out: dict[int, int] = {}
    for q in workload:
        out[q.template_id] = out.get(q.template_id, 0) + 1
    return out


@dataclass(frozen=True)
class VM:
    type_id: int
    queue: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "queue", tuple(self.queue))


@dataclass(frozen=True)
class Schedule:
    vms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "vms", tuple(self.vms))

    @classmethod
    def from_lists(cls, layout: Sequence[tuple[int, Sequence[Query]]]) -> "Schedule":
        return cls(tuple(VM(t, tuple(q)) for t, q in layout))

    @property
    def queries(self) -> list[Query]:
        return [q for vm in self.vms for q in vm.queue]

    def __len__(self):
        return len(self.vms)

    def template_layout(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(vm.type_id, tuple(q.template_id for q in vm.queue)) for vm in self.vms]


def effective_latency(q: Query, vm_type: int, catalog: TemplateCatalog) -> float:
    return catalog.latency(q.template_id, vm_type) + q.extra_wait


def validate(schedule: Schedule, catalog: TemplateCatalog) -> None:
    seen = set()
    for vm in schedule.vms:
        catalog.vm_type(vm.type_id)
        for q in vm.queue:
            catalog.template(q.template_id)
            if q.instance_id in seen:
                raise ValidationError(f"query {q.instance_id} scheduled twice")
            seen.add(q.instance_id)
            if not catalog.supports(vm.type_id, q.template_id):
                raise ValidationError(
                    f"VM type {vm.type_id} does not support template {q.template_id}")


def completion_times(schedule: Schedule, catalog: TemplateCatalog) -> dict[int, tuple[float, float]]:
    """Start and finish of every query, with each VM running its queue serially
    from time zero."""
    validate(schedule, catalog)
    out = {}
    for vm in schedule.vms:
        clock = 0.0
        for q in vm.queue:
            end = clock + effective_latency(q, vm.type_id, catalog)
            out[q.instance_id] = (clock, end)
            clock = end
    return out


# ---------------------------------------------------------------------------
# Performance goals
# ---------------------------------------------------------------------------


@dataclass(frozen=True, kw_only=True)
class PerformanceGoal:
    penalty_rate: float = 0.01

    kind = "abstract"
    monotonic = False
    shiftable = False

    def __post_init__(self):
        if self.penalty_rate < 0:
            raise ValidationError("penalty rate must be >= 0")

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, kw_only=True)
class MaxLatency(PerformanceGoal):
    deadline: float

    kind = "max"
    monotonic = True
    shiftable = True

    def __post_init__(self):
        super().__post_init__()
        if not self.deadline > 0:
            raise ValidationError("deadline must be > 0")

    def deadline_for(self, base_template: int) -> float:
        return self.deadline

    def to_dict(self):
        return {"variant": "max", "params": {"deadline_s": self.deadline},
                "penalty_usd_per_s": self.penalty_rate}


@dataclass(frozen=True, kw_only=True)
class PerQuery(PerformanceGoal):
    """Per-template deadlines, stored as sorted ``(template_id, seconds)``
    pairs so the goal stays hashable."""

    deadlines: tuple

    kind = "perquery"
    monotonic = True
    shiftable = True

    def __post_init__(self):
        super().__post_init__()
        d = self.deadlines
        items = d.items() if isinstance(d, Mapping) else d
        items = tuple(sorted((int(k), float(v)) for k, v in items))
        if not items or any(not v > 0 for _, v in items):
            raise ValidationError("per-query deadlines must be > 0")
        object.__setattr__(self, "deadlines", items)
        object.__setattr__(self, "_lookup", dict(items))

    def deadline_for(self, base_template: int) -> float:
        try:
            return self._lookup[base_template]
        except KeyError:
            raise ValidationError(f"no deadline for template {base_template}") from None

    def to_dict(self):
        return {"variant": "perquery",
                "params": {"deadlines_s": {str(k): v for k, v in self.deadlines}},
                "penalty_usd_per_s": self.penalty_rate}


@dataclass(frozen=True, kw_only=True)
class AverageLatency(PerformanceGoal):
    target: float

    kind = "average"

    def __post_init__(self):
        super().__post_init__()
        if not self.target > 0:
            raise ValidationError("average target must be > 0")

    def to_dict(self):
        return {"variant": "average", "params": {"target_s": self.target},
                "penalty_usd_per_s": self.penalty_rate}


@dataclass(frozen=True, kw_only=True)
class Percentile(PerformanceGoal):
    """At least ``fraction`` of the queries must finish within ``deadline``."""

    fraction: float
    deadline: float

    kind = "percentile"

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.fraction <= 1:
            raise ValidationError("percentile fraction must be in (0, 1]")
        if not self.deadline > 0:
            raise ValidationError("deadline must be > 0")

    def allowed_misses(self, n: int) -> int:
        # round first: (1 - 0.9) * 10 is 0.999... in binary floating point
        return math.floor(round((1.0 - self.fraction) * n, 9))

    def to_dict(self):
        return {"variant": "percentile",
                "params": {"fraction": self.fraction, "deadline_s": self.deadline},
                "penalty_usd_per_s": self.penalty_rate}


Goal = Union[MaxLatency, PerQuery, AverageLatency, Percentile]


def is_monotonic(goal: PerformanceGoal) -> bool:
    return goal.monotonic


def is_linearly_shiftable(goal: PerformanceGoal) -> bool:
    return goal.shiftable


def same_variant(a: PerformanceGoal, b: PerformanceGoal) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, PerQuery):
        return [k for k, _ in a.deadlines] == [k for k, _ in b.deadlines]
    if isinstance(a, Percentile):
        return a.fraction == b.fraction
    return True


def is_tighter(new: PerformanceGoal, old: PerformanceGoal) -> bool:
    """Whether ``new`` is at least as strict as ``old`` (same variant, no
    constraint relaxed).  Penalty rates must match."""
    if not same_variant(new, old) or new.penalty_rate != old.penalty_rate:
        return False
    if isinstance(new, PerQuery):
        return all(n <= o + EPS for (_, n), (_, o) in zip(new.deadlines, old.deadlines))
    if isinstance(new, AverageLatency):
        return new.target <= old.target + EPS
    return new.deadline <= old.deadline + EPS


def _per_query_violation(goal, q: Query, finish: float, catalog: TemplateCatalog) -> float:
    base = catalog.template(q.template_id).base_id
    return max(0.0, finish - goal.deadline_for(base))


def penalty(goal: PerformanceGoal, schedule: Schedule, catalog: TemplateCatalog) -> float:
    """Violation-period penalty of the queries present in ``schedule``."""
    times = completion_times(schedule, catalog)
    if not times:
        return 0.0
    rate = goal.penalty_rate
    if isinstance(goal, (MaxLatency, PerQuery)):
        total = 0.0
        for vm in schedule.vms:
            for q in vm.queue:
                total += _per_query_violation(goal, q, times[q.instance_id][1], catalog)
        return rate * total
    finishes = [f for _, f in times.values()]
    if isinstance(goal, AverageLatency):
        return rate * max(0.0, math.fsum(finishes) / len(finishes) - goal.target)
    if isinstance(goal, Percentile):
        m = goal.allowed_misses(len(finishes))
        c = sorted(finishes, reverse=True)[m]
        return rate * max(0.0, c - goal.deadline)
    raise TypeError(f"unsupported goal {goal!r}")


@dataclass(frozen=True)
class CostBreakdown:
    provisioning: float = 0.0
    processing: float = 0.0
    penalty: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.provisioning + self.processing + self.penalty)


def total_cost(goal: PerformanceGoal, schedule: Schedule, catalog: TemplateCatalog) -> CostBreakdown:
    prov = 0.0
    proc = 0.0
    for vm in schedule.vms:
        vt = catalog.vm_type(vm.type_id)
        prov += vt.startup_cost
        for q in vm.queue:
            proc += vt.rent_rate * effective_latency(q, vm.type_id, catalog)
    return CostBreakdown(prov, proc, penalty(goal, schedule, catalog))


# ---------------------------------------------------------------------------
# Goal transformations
# ---------------------------------------------------------------------------


def _tighten_value(g: float, t: float, p: float) -> float:
    return t + (g - t) * (1.0 - p)


def tighten_goal(goal: PerformanceGoal, p: float, strictest) -> PerformanceGoal:
    """Move every constraint a fraction ``p`` of the way from its current value
    ``g`` toward the strictest value ``t``: ``t + (g - t)(1 - p)``.

    ``p`` may be negative to loosen the goal (used for the looser strategy
    tiers); :func:`tighten_goal` itself only requires ``p <= 1``.
    For :class:`PerQuery`, ``strictest`` may be a mapping template -> seconds.
    """
    if p > 1 or not math.isfinite(p):
        raise ValueError(f"tightening fraction {p} outside [.., 1]")
    if isinstance(goal, PerQuery):
        out = {}
        for tid, g in goal.deadlines:
            t = strictest[tid] if isinstance(strictest, Mapping) else strictest
            out[tid] = _tighten_value(g, t, p)
        return replace(goal, deadlines=out)
    if isinstance(strictest, Mapping):
        raise ValueError("per-template strictest values only apply to PerQuery goals")
    if isinstance(goal, AverageLatency):
        return replace(goal, target=_tighten_value(goal.target, strictest, p))
    if isinstance(goal, (MaxLatency, Percentile)):
        return replace(goal, deadline=_tighten_value(goal.deadline, strictest, p))
    raise TypeError(f"unsupported goal {goal!r}")


def strictest_constraint(goal: PerformanceGoal, catalog: TemplateCatalog):
    """The tightest constraint that a schedule can still meet with a VM per
    query.  Max and Percentile use the slowest template, Average the mean
    template latency, PerQuery each template's own latency."""
    base = [t for t in catalog.templates if t.base is None]
    if isinstance(goal, PerQuery):
        return {t.id: catalog.min_latency(t.id) for t in base}
    lat = [catalog.min_latency(t.id) for t in base]
    if isinstance(goal, AverageLatency):
        return sum(lat) / len(lat)
    return max(lat)


def shift_goal(goal: PerformanceGoal, n: float) -> PerformanceGoal:
    """Goal under which starting immediately is equivalent to starting ``n``
    seconds late under ``goal``."""
    if not goal.shiftable:
        raise ValueError(f"{goal.kind} goals are not linearly shiftable")
    if n < 0:
        raise ValueError("shift must be >= 0")
    if isinstance(goal, MaxLatency):
        return replace(goal, deadline=goal.deadline - n)
    return replace(goal, deadlines={k: v - n for k, v in goal.deadlines})


# ---------------------------------------------------------------------------
# Incremental penalty accumulators
# ---------------------------------------------------------------------------
#
# The search and the runtime scheduler add one finish time at a time.  Each
# accumulator tracks exactly the state needed to evaluate the penalty of the
# queries added so far, answers "what if" queries without mutating, and
# exposes a hashable summary (``key``) that fully determines how future
# additions change the penalty.


class _PerQueryAcc:
    __slots__ = ("goal", "catalog", "total", "_dl")

    def __init__(self, goal, catalog, n_total):
        self.goal = goal
        self.catalog = catalog
        self.total = 0.0
        self._dl = {t.id: goal.deadline_for(t.base_id) for t in catalog.templates}

    def copy(self):
        c = object.__new__(type(self))
        c.goal, c.catalog, c.total, c._dl = self.goal, self.catalog, self.total, self._dl
        return c

    def delta(self, finish, tid):
        v = finish - self._dl[tid]
        return self.goal.penalty_rate * v if v > 0 else 0.0

    def add(self, finish, tid):
        v = finish - self._dl[tid]
        if v > 0:
            self.total += v

    @property
    def value(self):
        return self.goal.penalty_rate * self.total

    def key(self):
        return ()

    def lower_bound(self, extra_finishes):
        """Lowest penalty reachable once queries finishing no earlier than
        ``extra_finishes`` (pairs of (finish, template)) are added."""
        return self.value + sum(self.delta(f, t) for f, t in extra_finishes)


class _AverageAcc:
    __slots__ = ("goal", "total", "n")

    def __init__(self, goal, catalog, n_total):
        self.goal = goal
        self.total = 0.0
        self.n = 0

    def copy(self):
        c = object.__new__(type(self))
        c.goal, c.total, c.n = self.goal, self.total, self.n
        return c

    def _pen(self, total, n):
        if n == 0:
            return 0.0
        v = total / n - self.goal.target
        return self.goal.penalty_rate * v if v > 0 else 0.0

    def delta(self, finish, tid):
        return self._pen(self.total + finish, self.n + 1) - self._pen(self.total, self.n)

    def add(self, finish, tid):
        self.total += finish
        self.n += 1

    @property
    def value(self):
        return self._pen(self.total, self.n)

    def key(self):
        return (round(self.total, 6),)

    def dominance(self):
        # final penalty is non-decreasing in the running total
        return (self.total,)

    def lower_bound(self, extra_finishes):
        extra = [f for f, _ in extra_finishes]
        return self._pen(self.total + sum(extra), self.n + len(extra))


class _PercentileAcc:
    """Order-statistic tracker.  ``fin`` holds, in ascending order, the
    ``keep`` largest finishes seen so far; with ``m`` allowed misses the
    penalty is set by the ``(m + 1)``-th largest, ``fin[-(m + 1)]``."""

    __slots__ = ("goal", "fin", "n", "keep")

    def __init__(self, goal, catalog, n_total):
        self.goal = goal
        self.fin = []
        self.n = 0
        # finishes below the keep-th largest never matter for this workload
        self.keep = goal.allowed_misses(max(n_total, 1)) + 1

    def copy(self):
        c = object.__new__(type(self))
        c.goal, c.fin, c.n, c.keep = self.goal, list(self.fin), self.n, self.keep
        return c

    def _pen(self, c):
        v = c - self.goal.deadline
        return self.goal.penalty_rate * v if v > 0 else 0.0

    def delta(self, finish, tid):
        fin = self.fin
        j = self.goal.allowed_misses(self.n + 1) + 1
        p = bisect.bisect_right(fin, finish)
        i = len(fin) + 1 - j          # index in fin with ``finish`` inserted at p
        c = fin[i] if i < p else (finish if i == p else fin[i - 1])
        return self._pen(c) - self.value

    def add(self, finish, tid):
        self.n += 1
        fin = self.fin
        bisect.insort(fin, finish)
        if len(fin) > self.keep:
            del fin[0]

    @property
    def value(self):
        if not self.n:
            return 0.0
        return self._pen(self.fin[-(self.goal.allowed_misses(self.n) + 1)])

    def key(self):
        return tuple(round(f, 6) for f in self.fin)

    def dominance(self):
        # an order statistic is non-decreasing in every finish
        return tuple(self.fin)

    def lower_bound(self, extra_finishes):
        n = self.n + len(extra_finishes)
        if not n:
            return 0.0
        fin = sorted(self.fin + [f for f, _ in extra_finishes])
        return self._pen(fin[-(self.goal.allowed_misses(n) + 1)])


def penalty_accumulator(goal: PerformanceGoal, catalog: TemplateCatalog, n_total: int = 0):
    """Incremental penalty tracker for ``goal``.  ``n_total`` is the final
    workload size; it bounds the state the percentile tracker must keep."""
    if isinstance(goal, (MaxLatency, PerQuery)):
        return _PerQueryAcc(goal, catalog, n_total)
    if isinstance(goal, AverageLatency):
        return _AverageAcc(goal, catalog, n_total)
    if isinstance(goal, Percentile):
        return _PercentileAcc(goal, catalog, n_total)
    raise TypeError(f"unsupported goal {goal!r}")
