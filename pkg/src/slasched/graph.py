"""Lazily generated scheduling graph.

A vertex holds a partial schedule plus the multiset of unassigned templates.
Only the most recently provisioned ("head") VM accepts placements and a new VM
may be provisioned only once the head VM is non-empty; every complete
schedule without empty VMs stays reachable under these two rules.

Edge weights telescope: the weights along any path from the start vertex sum
to the total cost of the schedule at the end of the path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .core import (
    PerformanceGoal,
    Query,
    Schedule,
    TemplateCatalog,
    VM,
    ValidationError,
    penalty_accumulator,
    same_variant,
)


@dataclass(frozen=True, order=True)
class Place:
    template_id: int

    def __str__(self):
        return f"place(T{self.template_id})"


@dataclass(frozen=True, order=True)
class Provision:
    vm_type_id: int

    def __str__(self):
        return f"provision(vm{self.vm_type_id})"


Action = Union[Place, Provision]


@dataclass(frozen=True)
class Prefix:
    """VMs that already exist when the graph starts (online scheduling).

    ``head`` is ``(type_id, templates, busy_for)``: the existing VM that may
    receive further queries, the templates already on it, and how long until
    it is free.  ``finishes`` seeds the penalty with ``(finish, template_id)``
    pairs for queries whose completion is already fixed.
    """

    closed: tuple = ()
    head: tuple | None = None
    finishes: tuple = ()


class Vertex:
    __slots__ = ("graph", "closed", "head_type", "head", "head_wait", "head_used",
                 "unassigned", "base", "acc", "ref_acc", "g", "g_ref",
                 "parent", "action", "weight", "_key")

    def __repr__(self):
        return (f"Vertex(vms={self.layout()}, unassigned={self.unassigned_counts()}, "
                f"g={self.g:.6f})")

    @property
    def is_goal(self) -> bool:
        return not any(self.unassigned)

    @property
    def head_nonempty(self) -> bool:
        return self.head_used or bool(self.head)

    @property
    def penalty(self) -> float:
        return self.acc.value

    def key(self):
        # closed VMs cannot change and their effect on future penalties is
        # summarised by the accumulator key, so they are left out
        k = self._key
        if k is None:
            k = self._key = (self.head_type, round(self.head_wait, 6), self.head_nonempty,
                             self.unassigned, self.acc.key())
        return k

    def unassigned_counts(self) -> dict[int, int]:
        tids = self.graph.tids
        return {tids[i]: c for i, c in enumerate(self.unassigned) if c}

    def layout(self) -> list[tuple[int, tuple[int, ...]]]:
        out = list(self.closed)
        if self.head_type is not None:
            out.append((self.head_type, self.head))
        return out

    def path(self) -> list[tuple["Vertex", Action]]:
        """(vertex, action taken from it) pairs from the start vertex."""
        out = []
        v = self
        while v.parent is not None:
            out.append((v.parent, v.action))
            v = v.parent
        out.reverse()
        return out

    def schedule(self, workload: Sequence[Query] | None = None) -> Schedule:
        """Materialise the (partial) schedule.  Query instances are drawn
        from ``workload`` in instance order per template; without a workload
        placeholder instances are numbered by position."""
        return self.graph.materialize(self.layout(), workload)


def _insert(t: tuple, i: int, delta: int) -> tuple:
    lst = list(t)
    lst[i] += delta
    return tuple(lst)


class SchedulingGraph:
    """Scheduling graph for one workload under ``goal``.

    When ``ref_goal`` is given, vertices also track the cost under that goal
    and placement weights are obtained from the ``ref_goal`` weights by
    :func:`reweight`.
    """

    def __init__(self, workload: Iterable[Query] | dict, catalog: TemplateCatalog,
                 goal: PerformanceGoal, ref_goal: PerformanceGoal | None = None,
                 prefix: Prefix | None = None):
        if isinstance(workload, dict):
            counts = dict(workload)
            self.workload = None
        else:
            self.workload = list(workload)
            counts = {}
            for q in self.workload:
                if q.extra_wait:
                    raise ValidationError("queries with extra wait need an augmented catalog")
                counts[q.template_id] = counts.get(q.template_id, 0) + 1
        if sum(counts.values()) == 0:
            raise ValidationError("workload is empty")
        if ref_goal is not None and not same_variant(goal, ref_goal):
            raise ValidationError("reference goal must be the same metric variant")
        self.catalog = catalog
        self.goal = goal
        self.ref_goal = ref_goal
        self.prefix = prefix or Prefix()
        self.tids = catalog.template_ids
        idx = catalog.template_index
        vec = [0] * len(self.tids)
        for tid, c in counts.items():
            if tid not in idx:
                raise ValidationError(f"unknown template {tid}")
            vec[idx[tid]] += c
        self.counts = tuple(vec)
        self.n_total = sum(vec) + len(self.prefix.finishes)
        for i, c in enumerate(vec):
            if c and not any(self.tids[i] in v.supports for v in catalog.vm_types):
                raise ValidationError(f"template {self.tids[i]} cannot run on any VM type")
        # lat[vm_id][template index] (None = unsupported)
        self.lat = {
            v.id: tuple(t.latency[v.id] if t.id in v.supports else None for t in catalog.templates)
            for v in catalog.vm_types
        }
        self.rent = {v.id: v.rent_rate for v in catalog.vm_types}
        self.startup = {v.id: v.startup_cost for v in catalog.vm_types}
        self.vm_ids = tuple(v.id for v in catalog.vm_types)
        self.min_proc = tuple(catalog.min_processing_cost(t) for t in self.tids)
        self.min_lat = tuple(catalog.min_latency(t) for t in self.tids)
        # earliest possible (finish, template) of each template's queries
        self.min_finish = tuple(zip(self.min_lat, self.tids))

    # -- vertices -----------------------------------------------------------

    def _acc(self, goal):
        acc = penalty_accumulator(goal, self.catalog, self.n_total)
        for f, tid in self.prefix.finishes:
            acc.add(f, tid)
        return acc

    def start(self) -> Vertex:
        v = Vertex()
        v._key = None
        v.graph = self
        v.closed = tuple((t, tuple(q)) for t, q in self.prefix.closed)
        if self.prefix.head is not None:
            ht, hq, busy = self.prefix.head
            v.head_type, v.head, v.head_wait, v.head_used = ht, tuple(hq), float(busy), True
        else:
            v.head_type, v.head, v.head_wait, v.head_used = None, (), 0.0, False
        v.unassigned = self.counts
        v.base = 0.0
        v.acc = self._acc(self.goal)
        v.ref_acc = self._acc(self.ref_goal) if self.ref_goal is not None else None
        v.g = v.acc.value
        v.g_ref = v.ref_acc.value if v.ref_acc is not None else None
        v.parent = None
        v.action = None
        v.weight = 0.0
        return v

    def _child(self, u: Vertex, action: Action) -> Vertex:
        v = Vertex()
        v._key = None
        v.graph = self
        v.parent = u
        v.action = action
        v.acc = u.acc
        v.ref_acc = u.ref_acc
        v.unassigned = u.unassigned
        return v

    def place(self, u: Vertex, i: int) -> Vertex | None:
        """Child of ``u`` placing one template (by index) on the head VM, or
        None if the head VM cannot run it."""
        if u.head_type is None or not u.unassigned[i]:
            return None
        l = self.lat[u.head_type][i]
        if l is None:
            return None
        tid = self.tids[i]
        v = self._child(u, Place(tid))
        finish = u.head_wait + l
        proc = self.rent[u.head_type] * l
        v.closed = u.closed
        v.head_type = u.head_type
        v.head = u.head + (tid,)
        v.head_wait = finish
        v.head_used = u.head_used
        v.unassigned = _insert(u.unassigned, i, -1)
        v.base = u.base + proc
        v.acc = u.acc.copy()
        v.acc.add(finish, tid)
        if u.ref_acc is not None:
            v.ref_acc = u.ref_acc.copy()
            v.ref_acc.add(finish, tid)
            w_ref = proc + (v.ref_acc.value - u.ref_acc.value)
            v.g_ref = u.g_ref + w_ref
            v.weight = reweight_values(w_ref, u.acc.value, u.ref_acc.value,
                                       v.acc.value, v.ref_acc.value)
        else:
            v.g_ref = None
            v.weight = proc + (v.acc.value - u.acc.value)
        v.g = u.g + v.weight
        return v

    def provision(self, u: Vertex, vm_id: int) -> Vertex:
        v = self._child(u, Provision(vm_id))
        v.closed = u.closed + ((u.head_type, u.head),) if u.head_type is not None else u.closed
        v.head_type = vm_id
        v.head = ()
        v.head_wait = 0.0
        v.head_used = False
        v.base = u.base + self.startup[vm_id]
        v.weight = self.startup[vm_id]
        v.g = u.g + v.weight
        v.g_ref = u.g_ref + v.weight if u.g_ref is not None else None
        return v

    def successors(self, u: Vertex) -> list[tuple[Action, Vertex, float]]:
        out = []
        if u.head_type is not None:
            for i in range(len(self.tids)):
                v = self.place(u, i)
                if v is not None:
                    out.append((v.action, v, v.weight))
        if u.head_type is None or u.head_nonempty:
            if not u.is_goal:
                for vm_id in self.vm_ids:
                    v = self.provision(u, vm_id)
                    out.append((v.action, v, v.weight))
        return out

    def apply(self, u: Vertex, action: Action) -> Vertex:
        if isinstance(action, Provision):
            if u.head_type is not None and not u.head_nonempty:
                raise ValidationError("cannot provision while the head VM is empty")
            return self.provision(u, action.vm_type_id)
        v = self.place(u, self.catalog.template_index[action.template_id])
        if v is None:
            raise ValidationError(f"{action} is not available at this vertex")
        return v

    # -- output -------------------------------------------------------------

    def materialize(self, layout, workload: Sequence[Query] | None = None) -> Schedule:
        workload = workload if workload is not None else self.workload
        pools: dict[int, list[Query]] = {}
        if workload is not None:
            for q in sorted(workload, key=lambda q: q.instance_id):
                pools.setdefault(q.template_id, []).append(q)
            for p in pools.values():
                p.reverse()
        counter = 0
        vms = []
        for type_id, tids in layout:
            queue = []
            for tid in tids:
                if pools.get(tid):
                    queue.append(pools[tid].pop())
                else:
                    counter += 1
                    queue.append(Query(tid, -counter))
            vms.append(VM(type_id, tuple(queue)))
        return Schedule(tuple(vms))


# ---------------------------------------------------------------------------
# functional interface
# ---------------------------------------------------------------------------


def start_vertex(workload, catalog: TemplateCatalog, goal: PerformanceGoal,
                 ref_goal: PerformanceGoal | None = None) -> Vertex:
    if not isinstance(workload, dict) and not list(workload):
        raise ValidationError("workload is empty")
    return SchedulingGraph(workload, catalog, goal, ref_goal).start()


def successors(v: Vertex) -> list[tuple[Action, Vertex, float]]:
    return v.graph.successors(v)


def reweight_values(old_weight: float, pen_u: float, pen_ref_u: float,
                    pen_v: float, pen_ref_v: float) -> float:
    """Placement weight under the new goal from the weight under the old one:
    ``w + [P'(v) - P(v)] - [P'(u) - P(u)]`` with P the old-goal penalty."""
    return old_weight + (pen_v - pen_ref_v) - (pen_u - pen_ref_u)


def reweight(u: Vertex, action: Action, old_weight: float,
             old_goal: PerformanceGoal, new_goal: PerformanceGoal) -> float:
    """Weight of the edge from ``u`` taking ``action`` once the goal moves from
    ``old_goal`` to ``new_goal``.  Start-up edges keep their weight.

    Penalties are recomputed from the materialised schedules, independent of
    the incremental bookkeeping inside the graph.
    """
    from .core import penalty

    if not same_variant(old_goal, new_goal):
        raise ValidationError("goals must be the same metric variant")
    if isinstance(action, Provision):
        return old_weight
    catalog = u.graph.catalog
    v = u.graph.apply(u, action)
    su, sv = u.schedule(), v.schedule()
    return reweight_values(old_weight,
                           penalty(new_goal, su, catalog), penalty(old_goal, su, catalog),
                           penalty(new_goal, sv, catalog), penalty(old_goal, sv, catalog))


def to_dot(workload, catalog: TemplateCatalog, goal: PerformanceGoal, max_vertices: int = 500) -> str:
    """Breadth-first DOT dump of the reduced graph, for small instances."""
    root = start_vertex(workload, catalog, goal)
    ids = {root.key(): 0}
    lines = ["digraph scheduling {", '  n0 [label="start"];']
    frontier = [root]
    while frontier and len(ids) < max_vertices:
        nxt = []
        for u in frontier:
            for action, v, w in successors(u):
                k = v.key()
                new = k not in ids
                if new:
                    ids[k] = len(ids)
                    label = " | ".join(f"vm{t}:{''.join(f'T{x}' for x in q) or '-'}"
                                       for t, q in v.layout())
                    shape = ",shape=doublecircle" if v.is_goal else ""
                    lines.append(f'  n{ids[k]} [label="{label}"{shape}];')
                    nxt.append(v)
                lines.append(f'  n{ids[u.key()]} -> n{ids[k]} [label="{action} {w:.6f}"];')
        frontier = nxt
    lines.append("}")
    return "\n".join(lines) + "\n"

