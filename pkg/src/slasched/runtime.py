"""Scheduling with a trained strategy: batches by walking the decision tree,
and online arrivals with model reuse."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import (
    EPS,
    PerformanceGoal,
    Query,
    QueryTemplate,
    Schedule,
    TemplateCatalog,
    VM,
    ValidationError,
    penalty_accumulator,
    shift_goal,
)
from .features import INF_COST, extract_state
from .graph import Prefix, Provision, SchedulingGraph


# ---------------------------------------------------------------------------
# batch scheduling
# ---------------------------------------------------------------------------


@dataclass
class BatchRun:
    schedule: Schedule
    walks: int
    # (vm type, template ids, extends the prefix head VM?) per VM, in order
    layout: list = field(default_factory=list)
    fallbacks: int = 0


class _Builder:
    """Mutable counterpart of a graph vertex, so long batches stay linear."""

    def __init__(self, graph: SchedulingGraph):
        g = self.graph = graph
        self.k = len(g.tids)
        self.unassigned = list(g.counts)
        self.left = sum(g.counts)
        self.acc = g._acc(g.goal)
        self.layout = []
        self.head_type = None
        self.head_counts = [0] * self.k
        self.head_len = 0
        self.head_wait = 0.0
        head = g.prefix.head
        if head is not None:
            ht, tids, busy = head
            idx = g.catalog.template_index
            for t in tids:
                if t in idx:
                    self.head_counts[idx[t]] += 1
            self.head_type, self.head_len, self.head_wait = ht, len(tids), float(busy)
            self.layout.append([ht, [], True])
        self.head_used = head is not None

    def features(self):
        return extract_state(self.graph, self.head_type, self.head_counts, self.head_len,
                             self.head_wait, self.acc, self.unassigned)

    def place(self, i: int):
        g = self.graph
        l = g.lat[self.head_type][i]
        tid = g.tids[i]
        self.head_wait += l
        self.acc.add(self.head_wait, tid)
        self.unassigned[i] -= 1
        self.left -= 1
        self.head_counts[i] += 1
        self.head_len += 1
        self.layout[-1][1].append(tid)

    def provision(self, vm_id: int):
        self.head_type = vm_id
        self.head_counts = [0] * self.k
        self.head_len = 0
        self.head_wait = 0.0
        self.head_used = False
        self.layout.append([vm_id, [], False])

    @property
    def head_nonempty(self):
        return self.head_len > 0 or self.head_used

    def fresh_option(self):
        """(cost, vm type) of opening a VM and placing one remaining query
        on it, minimised over remaining templates and VM types."""
        g = self.graph
        best = None
        for j, c in enumerate(self.unassigned):
            if not c:
                continue
            for vm in g.vm_ids:
                l = g.lat[vm][j]
                if l is None:
                    continue
                cost = g.startup[vm] + g.rent[vm] * l + self.acc.delta(l, g.tids[j])
                if best is None or (cost, vm) < best:
                    best = (cost, vm)
        return best

    def cheapest_vm(self, i: int | None = None) -> int:
        """VM type minimising start-up + processing for template index ``i``
        (or for the cheapest remaining template when ``i`` is None)."""
        g = self.graph
        best = None
        rows = [i] if i is not None else [j for j, c in enumerate(self.unassigned) if c]
        for j in rows:
            for vm in g.vm_ids:
                l = g.lat[vm][j]
                if l is None:
                    continue
                c = (g.startup[vm] + g.rent[vm] * l, vm)
                if best is None or c < best:
                    best = c
        if best is None:
            return self.cheapest_vm(None) if i is not None else None
        return best[1]


def run_batch(strategy, workload: Sequence[Query], catalog: TemplateCatalog,
              prefix: Prefix | None = None, goal: PerformanceGoal | None = None,
              check_fingerprint: bool = True) -> BatchRun:
    """Schedule ``workload`` by repeatedly asking the strategy's tree for the
    next action.  Infeasible predictions are repaired:

    * Place(X) with no X left, or X unsupported on the head VM: the cheaper
      of placing the remaining template with the lowest placement cost and,
      if the head VM is in use, opening a new VM for one remaining query;
    * Place with no VM yet: provision the type cheapest for X;
    * Provision while the head VM is empty: place the cheapest template.

    Each walk either places a query or opens a VM that the next walk fills,
    so at most ``2n`` walks are needed.
    """
    workload = list(workload)
    if not workload:
        return BatchRun(Schedule(), 0)
    if check_fingerprint and catalog.fingerprint() != strategy.fingerprint:
        raise ValidationError("strategy was trained for a different catalog")
    goal = goal if goal is not None else strategy.goal
    counts: dict[int, int] = {}
    for q in workload:
        if q.extra_wait:
            raise ValidationError("map waiting queries onto augmented templates first")
        counts[q.template_id] = counts.get(q.template_id, 0) + 1
    graph = SchedulingGraph(counts, catalog, goal, prefix=prefix)
    b = _Builder(graph)
    tree = strategy.tree
    idx = catalog.template_index
    vm_ok = set(graph.vm_ids)
    walks = fixes = 0
    limit = 2 * len(workload)
    while b.left:
        if walks >= limit:
            raise RuntimeError("tree walk bound exceeded")  # unreachable by construction
        fv = b.features()
        a = tree.predict(fv)
        walks += 1
        if isinstance(a, Provision):
            if b.head_type is not None and not b.head_nonempty:
                fixes += 1
                a = None  # place the cheapest template instead
            else:
                vm = a.vm_type_id
                if vm not in vm_ok or not any(
                        c and graph.lat[vm][j] is not None for j, c in enumerate(b.unassigned)):
                    fixes += 1
                    vm = b.cheapest_vm()
                b.provision(vm)
                continue
        else:
            i = idx.get(a.template_id)
            if b.head_type is None:
                fixes += 1
                b.provision(b.cheapest_vm(i if i is not None and b.unassigned[i] else None))
                continue
            if i is not None and b.unassigned[i] and graph.lat[b.head_type][i] is not None:
                b.place(i)
                continue
            fixes += 1
        # cheapest repair: a placement on the head VM, or (when the head VM
        # is in use) a fresh VM for one remaining query
        best = None
        for j in range(b.k):
            if b.unassigned[j]:
                w = fv[1 + 4 * j + 2]
                if w < INF_COST and (best is None or w < best[0]):
                    best = (w, j)
        fresh = b.fresh_option() if b.head_nonempty else None
        if best is not None and (fresh is None or best[0] <= fresh[0] + EPS):
            b.place(best[1])
        elif fresh is not None:
            b.provision(fresh[1])
        else:
            # empty head VM that runs none of the remaining templates
            b.layout.pop()
            b.provision(b.cheapest_vm())
    pools: dict[int, list[Query]] = {}
    for q in sorted(workload, key=lambda q: -q.instance_id):
        pools.setdefault(q.template_id, []).append(q)
    vms = []
    for vm, tids, ext in b.layout:
        if ext and not tids:
            continue
        vms.append(VM(vm, tuple(pools[t].pop() for t in tids)))
    layout = [(vm, tuple(t), ext) for vm, t, ext in b.layout]
    return BatchRun(Schedule(tuple(vms)), walks, layout, fixes)


def schedule_batch(strategy, workload: Sequence[Query], catalog: TemplateCatalog) -> Schedule:
    return run_batch(strategy, workload, catalog).schedule


def map_unknown(latency: float, catalog: TemplateCatalog) -> int:
    """Template whose latency on the reference VM type (lowest id) is closest
    to ``latency``; ties go to the lower template id."""
    if not latency > 0:
        raise ValueError("latency must be > 0")
    ref = catalog.vm_types[0].id
    best = None
    for t in catalog.templates:
        if t.base is not None:
            continue
        l = t.latency.get(ref)
        if l is None:
            l = catalog.min_latency(t.id)
        d = (abs(l - latency), t.id)
        if best is None or d < best:
            best = d
    return best[1]


# ---------------------------------------------------------------------------
# online scheduling
# ---------------------------------------------------------------------------


@dataclass
class OnlineVM:
    type_id: int
    opened_at: float
    started: list = field(default_factory=list)   # (query, start, finish), fixed
    planned: list = field(default_factory=list)   # queries queued, not started
    free_at: float = 0.0                          # finish of the last started query

    def next_start(self, q: Query) -> float:
        return max(self.free_at, q.arrival_time)


@dataclass
class ArrivalResult:
    """How one arrival was handled."""

    batch: list                  # the queries of B_i
    omega: float
    path: str                    # "base", "shift" or "retrain"
    cache_hit: bool
    strategy: object = field(repr=False, default=None)
    run: BatchRun | None = field(repr=False, default=None)
    catalog: TemplateCatalog | None = field(repr=False, default=None)
    batch_queries: list = field(repr=False, default_factory=list)
    prefix: Prefix | None = field(repr=False, default=None)
    goal: PerformanceGoal | None = field(repr=False, default=None)


class ModelCache:
    """LRU map from a quantised wait signature to a trained strategy."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.capacity = capacity
        self._d: OrderedDict = OrderedDict()
        self.hits = self.misses = 0

    def get(self, key):
        st = self._d.get(key)
        if st is None:
            self.misses += 1
            return None
        self.hits += 1
        self._d.move_to_end(key)
        return st

    def put(self, key, value):
        self._d[key] = value
        self._d.move_to_end(key)
        while len(self._d) > self.capacity:
            self._d.popitem(last=False)

    def __len__(self):
        return len(self._d)

    def __contains__(self, key):
        return key in self._d


@dataclass
class OnlineState:
    """Scheduler state between arrivals.

    ``mode`` picks how a batch whose queries have waited is scheduled:
    ``"shift"`` adapts the base strategy to the goal shifted by the quantised
    ω, ``"retrain"`` trains on a catalog with one augmented template per
    (template, quantised wait), and ``"auto"`` shifts when the goal allows it.
    """

    strategy: object
    catalog: TemplateCatalog
    mode: str = "auto"
    epsilon: float = 1.0
    cache: ModelCache = field(default_factory=ModelCache)
    retrain_spec: object = None          # TrainingSpec template for the retrain path
    workers: int = 1
    clock: float = 0.0
    vms: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    log: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mode not in ("auto", "shift", "retrain"):
            raise ValueError(f"unknown online mode {self.mode!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @property
    def goal(self) -> PerformanceGoal:
        return self.strategy.goal

    @property
    def running(self) -> list:
        return [(q, s, f) for vm in self.vms for q, s, f in vm.started if f > self.clock]

    def quantise(self, t: float) -> float:
        return round(t / self.epsilon) * self.epsilon


def omega(state: OnlineState, now: float) -> float:
    """Age of the oldest query that has arrived but not started."""
    if not state.pending:
        return 0.0
    return now - min(q.arrival_time for q in state.pending)


def _advance(state: OnlineState, now: float) -> None:
    """Start every planned query whose start time is not after ``now``; the
    rest go back to ``pending``."""
    state.pending = []
    for vm in state.vms:
        keep = []
        for q in vm.planned:
            if not keep and vm.next_start(q) <= now:
                s = vm.next_start(q)
                f = s + state.catalog.latency(q.template_id, vm.type_id)
                vm.started.append((q, s, f))
                vm.free_at = f
            else:
                keep.append(q)
        vm.planned = []
        state.pending.extend(keep)
    state.pending.sort(key=lambda q: q.instance_id)
    state.clock = now


def _prefix(state: OnlineState, now: float, seed_finishes: bool):
    """Fixed part of the new batch's graph: the busy VM that frees up first
    becomes the head VM; VMs already idle are released."""
    busy = [(vm.free_at - now, i) for i, vm in enumerate(state.vms) if vm.free_at > now]
    fin = ()
    if seed_finishes:
        fin = tuple((f - q.arrival_time, q.template_id) for q, s, f in state.running)
    if not busy:
        return None, Prefix(finishes=fin)
    left, i = min(busy)
    vm = state.vms[i]
    on = tuple(q.template_id for q, s, f in vm.started if f > now)
    return i, Prefix(head=(vm.type_id, on, left), finishes=fin)


def _shift_strategy(state: OnlineState, w: float):
    from .advisor import adapt

    key = ("shift", w)
    st = state.cache.get(key)
    if st is not None:
        return st, True
    st = adapt(state.strategy, shift_goal(state.goal, w), state.catalog, state.workers)
    state.cache.put(key, st)
    return st, False


def _augment(state: OnlineState, waits):
    """Augmented catalog for (base template, wait) pairs, ids after the
    catalog's largest, in sorted pair order."""
    base = state.catalog
    nxt = max(base.template_ids) + 1
    extra, ids = [], {}
    for k, (tid, w) in enumerate(waits):
        t = base.template(tid)
        extra.append(QueryTemplate(nxt + k, {v: l + w for v, l in t.latency.items()},
                                   t.deadline, tid))
        ids[(tid, w)] = nxt + k
    return base.with_templates(extra), ids


def _retrain_strategy(state: OnlineState, key):
    from dataclasses import replace as _replace

    from .advisor import spec_of, train

    cat, ids = _augment(state, key[1])
    st = state.cache.get(key)
    if st is not None:
        return st, True, cat, ids
    spec = state.retrain_spec
    if spec is None:
        spec = spec_of(state.strategy, state.catalog, workers=state.workers)
    spec = _replace(spec, catalog=cat, goal=state.goal)
    st = train(spec)
    state.cache.put(key, st)
    return st, False, cat, ids


def plan_batch(state: OnlineState, now: float, path: str | None = None) -> ArrivalResult:
    """Schedule the current pending queries (without committing).  ``path``
    forces "shift" or "retrain"; by default it follows ``state.mode``."""
    batch = list(state.pending)
    om = omega(state, now)
    goal = state.goal
    if path is None:
        path = state.mode
        if path == "auto":
            path = "shift" if goal.shiftable else "retrain"
    waits = {q.instance_id: state.quantise(now - q.arrival_time) for q in batch}
    if path == "shift":
        w = state.quantise(om)
        try:
            shifted = shift_goal(goal, w)
        except Exception:
            shifted = None
        if w == 0:
            st, hit, g = state.strategy, True, goal
            path = "base"
        elif shifted is not None and _valid_deadlines(shifted):
            st, hit = _shift_strategy(state, w)
            g = st.goal
        else:
            path = "retrain"  # the shifted deadline is already missed
    if path == "retrain":
        pairs = tuple(sorted({(q.template_id, waits[q.instance_id])
                              for q in batch if waits[q.instance_id] > 0}))
        if not pairs:
            st, hit, g, cat, ids = state.strategy, True, goal, state.catalog, {}
            path = "base"
        else:
            st, hit, cat, ids = _retrain_strategy(state, ("retrain", pairs))
            g = goal
        bq = [Query(ids.get((q.template_id, waits[q.instance_id]), q.template_id), q.instance_id)
              for q in batch]
        head_i, prefix = _prefix(state, now, True)
    else:
        cat = state.catalog
        bq = [Query(q.template_id, q.instance_id) for q in batch]
        head_i, prefix = _prefix(state, now, False)
    run = run_batch(st, bq, cat, prefix=prefix, goal=g)
    res = ArrivalResult(batch, om, path, hit, st, run, cat, bq, prefix, g)
    res.head_index = head_i
    return res


def _valid_deadlines(goal) -> bool:
    from .core import PerQuery

    if isinstance(goal, PerQuery):
        return all(v > 0 for _, v in goal.deadlines)
    return goal.deadline > 0


def online_arrival(state: OnlineState, q: Query, now: float | None = None):
    """Handle the arrival of ``q``: every query not yet started is
    rescheduled together with it.  Returns the arrival record and the
    (mutated) state."""
    now = q.arrival_time if now is None else now
    if now < state.clock - EPS:
        raise ValidationError(f"clock regression: {now} < {state.clock}")
    if q.arrival_time > now + EPS:
        raise ValidationError("query arrives after the current time")
    _advance(state, now)
    state.pending.append(q)
    res = plan_batch(state, now)
    _commit(state, res, now)
    state.log.append(res)
    return res, state


def _commit(state: OnlineState, res: ArrivalResult, now: float) -> None:
    byid = {q.instance_id: q for q in res.batch}
    pools: dict[int, list[Query]] = {}
    for bq in sorted(res.batch_queries, key=lambda q: -q.instance_id):
        pools.setdefault(bq.template_id, []).append(byid[bq.instance_id])
    for vm_type, tids, ext in res.run.layout:
        queue = [pools[t].pop() for t in tids]
        if ext:
            state.vms[res.head_index].planned = queue
        elif queue:
            state.vms.append(OnlineVM(vm_type, now, planned=queue, free_at=now))
    state.pending = []


def finish(state: OnlineState) -> None:
    """Run every planned query to completion."""
    _advance(state, float("inf"))
    state.clock = max([state.clock] + [vm.free_at for vm in state.vms if vm.started])


@dataclass
class OnlineOutcome:
    rows: list           # (query, vm index, vm type, start, finish, violation_s)
    provisioning: float
    processing: float
    penalty: float

    @property
    def total(self) -> float:
        return self.provisioning + self.processing + self.penalty


def response_penalty(goal: PerformanceGoal, catalog: TemplateCatalog, responses) -> float:
    """Penalty of ``(template_id, response time)`` pairs."""
    acc = penalty_accumulator(goal, catalog, len(responses))
    for tid, r in responses:
        acc.add(r, tid)
    return acc.value


def _violation(goal, catalog, tid, r):
    from .core import AverageLatency

    if isinstance(goal, AverageLatency):
        return max(0.0, r - goal.target)
    if hasattr(goal, "deadline_for"):
        return max(0.0, r - goal.deadline_for(catalog.template(tid).base_id))
    return max(0.0, r - goal.deadline)


def outcome(state: OnlineState) -> OnlineOutcome:
    """Realised cost: start-up per VM, rent for processing time, and the
    goal's penalty over response times (finish minus arrival)."""
    cat, goal = state.catalog, state.goal
    rows, resp = [], []
    prov = proc = 0.0
    for i, vm in enumerate(state.vms):
        vt = cat.vm_type(vm.type_id)
        prov += vt.startup_cost
        for q, s, f in vm.started:
            proc += vt.rent_rate * (f - s)
            r = f - q.arrival_time
            resp.append((q.template_id, r))
            rows.append((q.instance_id, i, vm.type_id, s, f, _violation(goal, cat, q.template_id, r)))
    if any(vm.planned for vm in state.vms) or state.pending:
        raise ValidationError("call finish() before computing the outcome")
    rows.sort()
    return OnlineOutcome(rows, prov, proc, response_penalty(goal, cat, resp))


def simulate(state: OnlineState, arrivals: Sequence[Query]) -> OnlineOutcome:
    for q in sorted(arrivals, key=lambda q: (q.arrival_time, q.instance_id)):
        online_arrival(state, q)
    finish(state)
    return outcome(state)


# ---------------------------------------------------------------------------
# clairvoyant reference
# ---------------------------------------------------------------------------


def clairvoyant_optimum(arrivals: Sequence[Query], catalog: TemplateCatalog,
                        goal: PerformanceGoal, cap: int = 8) -> float:
    """Cheapest non-preemptive schedule for a trace known in advance, by
    enumerating every assignment of queries to ordered VM queues.  A query
    starts at the later of its arrival and its predecessor's finish; idle time
    is not charged, matching :func:`outcome`."""
    qs = sorted(arrivals, key=lambda q: (q.arrival_time, q.instance_id))
    if len(qs) > cap:
        raise ValueError(f"clairvoyant search limited to {cap} queries")
    if not qs:
        return 0.0
    vm_ids = [v.id for v in catalog.vm_types]
    best = [float("inf")]
    queues: list[tuple[int, list[Query]]] = []

    def cost():
        prov = proc = 0.0
        resp = []
        for vt_id, queue in queues:
            vt = catalog.vm_type(vt_id)
            prov += vt.startup_cost
            t = 0.0
            for q in queue:
                l = catalog.latency(q.template_id, vt_id)
                t = max(t, q.arrival_time) + l
                proc += vt.rent_rate * l
                resp.append((q.template_id, t - q.arrival_time))
        return prov + proc + response_penalty(goal, catalog, resp)

    def rec(k):
        if k == len(qs):
            best[0] = min(best[0], cost())
            return
        q = qs[k]
        for vt_id, queue in queues:
            if not catalog.supports(vt_id, q.template_id):
                continue
            for pos in range(len(queue) + 1):
                queue.insert(pos, q)
                rec(k + 1)
                del queue[pos]
        for v in vm_ids:
            if catalog.supports(v, q.template_id):
                queues.append((v, [q]))
                rec(k + 1)
                queues.pop()

    rec(0)
    return best[0]


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------


def read_trace(fh, catalog: TemplateCatalog) -> list[Query]:
    """Rows ``arrival_time_s, template_id[, raw_latency_s]`` with a header.
    When a raw latency is given the query is re-bucketed with
    :func:`map_unknown`."""
    out = []
    r = csv.reader(fh)
    header = next(r, None)
    if header is None:
        return out
    for i, row in enumerate(r, start=1):
        if not row:
            continue
        t = float(row[0])
        tid = int(row[1])
        if len(row) > 2 and row[2].strip():
            tid = map_unknown(float(row[2]), catalog)
        out.append(Query(tid, i, t))
    return out


def write_trace(fh, rows: Iterable[tuple]) -> None:
    w = csv.writer(fh)
    w.writerow(["arrival_time_s", "template_id", "raw_latency_s"])
    for row in rows:
        w.writerow(["" if x is None else x for x in row])


def write_outcome(fh, out: OnlineOutcome) -> None:
    w = csv.writer(fh)
    w.writerow(["query", "vm_index", "vm_type", "start_s", "finish_s", "violation_s"])
    for row in out.rows:
        w.writerow(row)
