"""Optimal schedule search.

``astar`` runs A* over the reduced scheduling graph.  The heuristics are all
lower bounds on the remaining cost:

* ``monotonic``: cheapest processing cost of the unassigned queries.  Only
  valid when penalties never shrink as queries are added.
* ``bound``: the same processing bound plus the lowest final penalty still
  reachable, minus the penalty already paid.  Valid for every goal, and can be
  negative when a goal's penalty may still fall (average latency).
* ``null``: zero.  For goals whose penalty can fall, zero is not a lower bound,
  so the search then runs to exhaustion instead of stopping at the first goal.
* ``adaptive``: reuses a finished search under a looser goal.  For monotonic
  goals ``max(h_monotonic, Cost_old(goal) - Cost_old(v))`` over the recorded
  closed set; otherwise ``max(h_bound, Cost_old(goal) - Cost_new(v))``.

``brute_force_optimal`` enumerates schedules directly and evaluates them with
:func:`slasched.core.total_cost`; it shares nothing with the graph code and is
the reference used by the tests.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import (
    EPS,
    PerformanceGoal,
    Query,
    Schedule,
    TemplateCatalog,
    VM,
    ValidationError,
    template_counts,
    total_cost,
)
from .graph import Action, Prefix, SchedulingGraph, Vertex


class SearchLimitExceeded(RuntimeError):
    """The search expanded more vertices than its cap allows."""


@dataclass
class RecordedCosts:
    """Costs from a finished search: best g per vertex key over the whole
    closed set, and the optimal goal cost."""

    goal: PerformanceGoal
    costs: dict = field(default_factory=dict)
    goal_cost: float = 0.0

    def __len__(self):
        return len(self.costs)


@dataclass
class SearchResult:
    schedule: Schedule
    path: list
    cost: float
    expanded: int
    vertex: Vertex = field(repr=False, default=None)
    record: RecordedCosts | None = field(repr=False, default=None)

    @property
    def actions(self) -> list[Action]:
        return [a for _, a in self.path]


# ---------------------------------------------------------------------------
# heuristics
# ---------------------------------------------------------------------------


def h_monotonic(v: Vertex, catalog: TemplateCatalog | None = None) -> float:
    mp = v.graph.min_proc
    return sum(c * mp[i] for i, c in enumerate(v.unassigned) if c)


def h_bound(v: Vertex, catalog: TemplateCatalog | None = None) -> float:
    pairs = v.graph.min_finish
    extra = []
    for i, c in enumerate(v.unassigned):
        if c:
            extra += [pairs[i]] * c
    return h_monotonic(v) + v.acc.lower_bound(extra) - v.acc.value


def h_null(v: Vertex, catalog: TemplateCatalog | None = None) -> float:
    return 0.0


def h_adaptive(v: Vertex, rec: RecordedCosts, catalog: TemplateCatalog | None = None,
               goal: PerformanceGoal | None = None) -> float:
    goal = goal if goal is not None else v.graph.goal
    if goal.monotonic:
        # tightening a monotonic goal never lowers an edge weight, so the old
        # remaining cost Cost_old(goal) - Cost_old(v) is still a lower bound
        old = rec.costs.get(v.key())
        base = h_monotonic(v)
        return base if old is None else max(base, rec.goal_cost - old)
    # Average/percentile edges can get cheaper under a tighter goal; only the
    # complete schedules are known to cost at least Cost_old(goal), so compare
    # against the cost paid so far under the new goal
    return max(h_bound(v), rec.goal_cost - v.g)


def h_adaptive_floored(v: Vertex, rec: RecordedCosts) -> float:
    """The recorded-cost heuristic applied uniformly, with the non-monotonic
    case floored at zero.  Kept for the admissibility report only."""
    old = rec.costs.get(v.key())
    if v.graph.goal.monotonic:
        base = h_monotonic(v)
        return base if old is None else max(base, rec.goal_cost - old)
    return 0.0 if old is None else max(0.0, rec.goal_cost - old)


def _heuristic(kind: str, goal: PerformanceGoal, record: RecordedCosts | None):
    if kind == "auto":
        kind = "adaptive" if record is not None else ("monotonic" if goal.monotonic else "bound")
    if kind == "monotonic":
        if not goal.monotonic:
            raise ValueError(f"monotonic heuristic is not admissible for {goal.kind} goals")
        return kind, h_monotonic
    if kind == "bound":
        return kind, h_bound
    if kind == "null":
        return kind, h_null
    if kind == "adaptive":
        if record is None:
            raise ValueError("adaptive heuristic needs recorded costs")
        return kind, lambda v: h_adaptive(v, record, goal=goal)
    raise ValueError(f"unknown heuristic {kind!r}")


# ---------------------------------------------------------------------------
# A*
# ---------------------------------------------------------------------------


def _dominated(v: Vertex, fronts: dict, dead: dict) -> bool:
    """Pareto pruning for goals whose penalty depends on finish times only
    through a summary that the final penalty is monotone in (running total,
    largest finishes).  Among vertices that agree on everything else, ``u``
    dominates ``v`` when it paid no more outside the penalty and its summary
    is no larger componentwise: every completion of ``v`` costs at least as
    much from ``u``.  Records ``v`` in its front unless it is dominated,
    marking the entries it dominates in ``dead``."""
    rk = (v.head_type, round(v.head_wait, 6), v.head_nonempty, v.unassigned)
    base = v.g - v.acc.value
    vec = v.acc.dominance()
    front = fronts.setdefault(rk, [])
    tol = EPS * max(1.0, abs(base))
    for b, d, u in front:
        if b <= base + tol and len(d) == len(vec) and all(x <= y + 1e-9 for x, y in zip(d, vec)):
            return True
    keep = []
    for e in front:
        b, d, u = e
        if base <= b + tol and len(d) == len(vec) and all(x <= y + 1e-9 for x, y in zip(vec, d)):
            dead[id(u)] = u
        else:
            keep.append(e)
    keep.append((base, vec, v))
    fronts[rk] = keep
    return False


def astar(workload: Sequence[Query] | dict, catalog: TemplateCatalog, goal: PerformanceGoal,
          heuristic: str = "auto", record: RecordedCosts | None = None,
          max_expanded: int = 5_000_000, prefix: Prefix | None = None,
          ref_goal: PerformanceGoal | None = None, keep_record: bool = False) -> SearchResult:
    """Minimum-cost complete schedule for ``workload``.

    With ``record`` (from a search under a looser goal) and
    ``heuristic="adaptive"`` or ``"auto"``, placement weights are obtained by
    reweighting the old goal's weights and the recorded costs guide the
    search.  ``keep_record`` returns the closed-set costs for later reuse.
    """
    if record is not None and ref_goal is None:
        ref_goal = record.goal
    graph = SchedulingGraph(workload, catalog, goal, ref_goal=ref_goal, prefix=prefix)
    kind, h = _heuristic(heuristic, goal, record)
    exhaustive = kind == "null" and not goal.monotonic
    start = graph.start()
    tie = itertools.count()
    best_g = {start.key(): start.g}
    h0 = h(start)
    heap = [(start.g + h0, h0, next(tie), start)]
    closed: dict = {}
    expanded = 0
    best_goal: Vertex | None = None
    dominance = hasattr(start.acc, "dominance")
    fronts: dict = {}
    dead: dict = {}  # id -> vertex; holding the vertex keeps its id unique
    if dominance:
        _dominated(start, fronts, dead)
    while heap:
        f, hv, _, v = heapq.heappop(heap)
        k = v.key()
        if v.g > best_g[k] + EPS * max(1.0, abs(best_g[k])):
            continue
        if id(v) in dead:
            continue
        if exhaustive and best_goal is not None and v.is_goal and v.g >= best_goal.g:
            continue
        expanded += 1
        if expanded > max_expanded:
            raise SearchLimitExceeded(f"search expanded more than {max_expanded} vertices")
        closed[k] = v.g
        if v.is_goal:
            if not exhaustive:
                best_goal = v
                break
            if best_goal is None or v.g < best_goal.g - EPS:
                best_goal = v
            continue
        for _, s, _ in graph.successors(v):
            ks = s.key()
            old = best_g.get(ks)
            if old is not None and s.g >= old - EPS * max(1.0, abs(old)):
                continue
            if dominance and _dominated(s, fronts, dead):
                continue
            best_g[ks] = s.g
            hs = h(s)
            heapq.heappush(heap, (s.g + hs, hs, next(tie), s))
    if best_goal is None:
        raise ValidationError("no complete schedule exists for this workload")
    schedule = best_goal.schedule()
    cost = best_goal.g
    if prefix is None:
        cost = total_cost(goal, schedule, catalog).total
        assert cost >= 0, "negative total cost"
    rec = None
    if keep_record:
        rec = RecordedCosts(goal, closed, best_goal.g)
    return SearchResult(schedule, best_goal.path(), cost, expanded, best_goal, rec)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def _sequences(counts: dict[int, int], allowed: frozenset | None = None):
    """Every non-empty sequence drawn from the multiset ``counts``."""
    keys = sorted(t for t, c in counts.items() if c and (allowed is None or t in allowed))

    def rec(prefix):
        for t in keys:
            if counts[t]:
                counts[t] -= 1
                seq = prefix + (t,)
                yield seq
                yield from rec(seq)
                counts[t] += 1

    yield from rec(())


def _vm_multisets(counts: dict[int, int], catalog: TemplateCatalog, lower=None):
    """Every multiset of non-empty VMs ``(type, template sequence)`` whose
    queries are exactly ``counts``.  VMs are generated in non-decreasing order
    so each multiset appears once."""
    if not any(counts.values()):
        yield ()
        return
    for vt in catalog.vm_types:
        for seq in list(_sequences(counts, vt.supports)):
            vm = (vt.id, seq)
            if lower is not None and vm < lower:
                continue
            for t in seq:
                counts[t] -= 1
            for rest in _vm_multisets(counts, catalog, vm):
                yield (vm,) + rest
            for t in seq:
                counts[t] += 1


def _bind(layout, workload: Sequence[Query]) -> Schedule:
    pools: dict[int, list[Query]] = {}
    for q in sorted(workload, key=lambda q: -q.instance_id):
        pools.setdefault(q.template_id, []).append(q)
    return Schedule(tuple(VM(t, tuple(pools[x].pop() for x in seq)) for t, seq in layout))


def enumerate_schedules(workload: Sequence[Query], catalog: TemplateCatalog) -> Iterable[Schedule]:
    """All complete schedules without empty VMs, up to relabelling queries of
    the same template (which never changes the cost)."""
    counts = template_counts(workload)
    for layout in _vm_multisets(dict(counts), catalog):
        yield _bind(layout, workload)


def brute_force_optimal(workload: Sequence[Query], catalog: TemplateCatalog,
                        goal: PerformanceGoal, cap: int = 8) -> SearchResult:
    workload = list(workload)
    if len(workload) > cap:
        raise ValueError(f"brute force limited to {cap} queries, got {len(workload)}")
    if not workload:
        return SearchResult(Schedule(), [], 0.0, 0)
    best, best_cost, n = None, float("inf"), 0
    for s in enumerate_schedules(workload, catalog):
        n += 1
        c = total_cost(goal, s, catalog).total
        if c < best_cost:
            best, best_cost = s, c
    if best is None:
        raise ValidationError("no complete schedule exists for this workload")
    return SearchResult(best, [], best_cost, n)


def brute_force_cost_to_go(v: Vertex, goal: PerformanceGoal | None = None) -> float:
    """Exact minimum remaining cost from ``v`` under ``goal`` (default: the
    vertex's graph goal), over completions reachable in the reduced graph:
    the head VM's queue is extended, then fresh VMs hold the rest."""
    g = v.graph
    goal = goal if goal is not None else g.goal
    catalog = g.catalog
    if v.is_goal:
        return 0.0
    here = total_cost(goal, v.schedule(), catalog).total
    counts = dict(v.unassigned_counts())
    layout = list(v.closed)
    best = float("inf")
    heads = [()]
    if v.head_type is not None:
        supported = catalog.vm_type(v.head_type).supports
        exts = list(_sequences(dict(counts), supported))
        heads = exts if not v.head_nonempty else [()] + exts
    for ext in heads:
        rem = dict(counts)
        for t in ext:
            rem[t] -= 1
        head = [(v.head_type, v.head + ext)] if v.head_type is not None else []
        for rest in _vm_multisets(rem, catalog):
            s = g.materialize(layout + head + list(rest))
            best = min(best, total_cost(goal, s, catalog).total)
    return best - here


def reduced_graph_optimum(workload: Sequence[Query], catalog: TemplateCatalog,
                          goal: PerformanceGoal) -> float:
    """Minimum goal-vertex cost over every path of the reduced graph, found by
    plain depth-first enumeration without any pruning or deduplication."""
    graph = SchedulingGraph(list(workload), catalog, goal)
    best = float("inf")
    stack = [graph.start()]
    while stack:
        u = stack.pop()
        if u.is_goal:
            best = min(best, u.g)
            continue
        stack.extend(v for _, v, _ in graph.successors(u))
    return best
