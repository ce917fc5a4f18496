"""Offline pipeline: sample workloads, solve them optimally, distil the optimal
decisions into a tree, adapt trees to stricter goals and pick strategy tiers.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .config import goal_from_dict
from .core import (
    MaxLatency,
    PerQuery,
    PerformanceGoal,
    Query,
    Schedule,
    TemplateCatalog,
    ValidationError,
    completion_times,
    effective_latency,
    is_tighter,
    make_workload,
    penalty,
    same_variant,
    strictest_constraint,
    tighten_goal,
)
from .features import TrainingSample, feature_names, harvest
from .graph import Place, Provision, SchedulingGraph
from .learn import DecisionTree, TreeParams, fit
from .runtime import schedule_batch
from .search import SearchLimitExceeded, astar

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSpec:
    catalog: TemplateCatalog
    goal: PerformanceGoal
    N: int = 3000
    m: int = 18
    seed: int = 0
    tree: TreeParams = field(default_factory=TreeParams)
    cost_sample_size: int = 1000
    max_expanded: int = 5_000_000
    workers: int = 1
    canonical: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.cost_sample_size < 1:
            raise ValueError("cost_sample_size must be >= 1")


@dataclass
class Strategy:
    tree: DecisionTree
    goal: PerformanceGoal
    fingerprint: str
    cost_vector: dict              # template id -> average $ per query
    workloads: list = field(default_factory=list, repr=False)   # template-id lists
    records: list | None = field(default=None, repr=False)      # RecordedCosts per workload
    n_samples: int = 0
    expanded: int = 0
    spec: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "goal": self.goal.to_dict(),
            "fingerprint": self.fingerprint,
            "cost_vector": {str(k): v for k, v in sorted(self.cost_vector.items())},
            "tree": self.tree.to_dict(),
            "workloads": [list(w) for w in self.workloads],
            "n_samples": self.n_samples,
            "expanded": self.expanded,
            "spec": self.spec,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Strategy":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported strategy format version {d.get('version')!r}")
        return cls(DecisionTree.from_dict(d["tree"]), goal_from_dict(d["goal"]), d["fingerprint"],
                   {int(k): float(v) for k, v in d["cost_vector"].items()},
                   [tuple(w) for w in d.get("workloads", [])], None,
                   d.get("n_samples", 0), d.get("expanded", 0), d.get("spec", {}))

    @classmethod
    def from_json(cls, s: str) -> "Strategy":
        return cls.from_dict(json.loads(s))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def sample_workloads(catalog: TemplateCatalog, N: int, m: int, seed: int) -> list[list[Query]]:
    """``N`` workloads of ``m`` queries, templates drawn uniformly."""
    tids = list(catalog.template_ids)
    if not tids:
        raise ValidationError("catalog has no templates")
    rng = random.Random(seed)
    return [make_workload(rng.choices(tids, k=m)) for _ in range(N)]


def canonical_path(workload, schedule: Schedule, catalog: TemplateCatalog,
                   goal: PerformanceGoal, cost: float):
    """A path to an optimal schedule written in a canonical form: queries on
    each VM shortest first, VMs in increasing order of busy time.  VM order
    never changes the cost; the within-VM reordering is kept only when the
    replayed cost still equals ``cost``.  Returns None if neither form
    reproduces it."""
    layout = schedule.template_layout()

    def busy(vm):
        return sum(catalog.latency(t, vm[0]) for t in vm[1])

    spt = [(vt, tuple(sorted(q, key=lambda t: (catalog.latency(t, vt), t)))) for vt, q in layout]
    for cand in (spt, layout):
        cand = sorted(cand, key=lambda vm: (busy(vm), vm[0], vm[1]))
        g = SchedulingGraph(workload, catalog, goal)
        v = g.start()
        path = []
        for vt, tids in cand:
            for a in [Provision(vt)] + [Place(t) for t in tids]:
                path.append((v, a))
                v = g.apply(v, a)
        if abs(v.g - cost) <= 1e-9 * max(1.0, abs(cost)):
            return path
    return None


def _solve(args):
    """One sample: optimal path under ``goal`` (adaptively when a record from
    the previous goal is given).  Runs in worker processes."""
    i, workload, catalog, goal, record, max_expanded, prev_goal, canonical = args
    try:
        if record is None and prev_goal is not None:
            # strategy loaded from disk: rebuild the old goal's closed set
            record = astar(workload, catalog, prev_goal, max_expanded=max_expanded,
                           keep_record=True).record
        if record is not None:
            res = astar(workload, catalog, goal, heuristic="adaptive", record=record,
                        max_expanded=max_expanded, keep_record=True)
        else:
            res = astar(workload, catalog, goal, max_expanded=max_expanded, keep_record=True)
    except SearchLimitExceeded as e:
        raise TrainingError(f"sample {i}: {e}") from None
    path = canonical_path(workload, res.schedule, catalog, goal, res.cost) if canonical else None
    return harvest(path or res.path), res.record, res.expanded, res.cost


def _run_all(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_solve, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_solve(j) for j in jobs]


def _cost_workload(catalog: TemplateCatalog, size: int, seed: int) -> list[Query]:
    rng = random.Random(f"cost-{seed}")
    return make_workload(rng.choices(list(catalog.template_ids), k=size))


def _build(spec: TrainingSpec, goal: PerformanceGoal, workloads, results, records_on=True) -> Strategy:
    samples: list[TrainingSample] = [s for r in results for s in r[0]]
    tree = fit(samples, spec.tree, feature_names(spec.catalog))
    st = Strategy(tree, goal, spec.catalog.fingerprint(), {},
                  [tuple(q.template_id for q in w) for w in workloads],
                  [r[1] for r in results] if records_on else None,
                  len(samples), sum(r[2] for r in results),
                  {"N": spec.N, "m": spec.m, "seed": spec.seed, "tree": spec.tree.to_dict(),
                   "cost_sample_size": spec.cost_sample_size, "canonical": spec.canonical})
    st.cost_vector = cost_vector(st, spec.catalog, spec.cost_sample_size, spec.seed)
    return st


def train(spec: TrainingSpec) -> Strategy:
    workloads = sample_workloads(spec.catalog, spec.N, spec.m, spec.seed)
    jobs = [(i, w, spec.catalog, spec.goal, None, spec.max_expanded, None, spec.canonical)
            for i, w in enumerate(workloads)]
    return _build(spec, spec.goal, workloads, _run_all(jobs, spec.workers))


def spec_of(strategy: Strategy, catalog: TemplateCatalog, goal: PerformanceGoal | None = None,
            workers: int = 1) -> TrainingSpec:
    s = strategy.spec
    return TrainingSpec(catalog, goal or strategy.goal, s.get("N", len(strategy.workloads)),
                        s.get("m", 2), s.get("seed", 0), TreeParams(**s.get("tree", {})),
                        s.get("cost_sample_size", 1000), workers=workers,
                        canonical=s.get("canonical", True))


def adapt(strategy: Strategy, new_goal: PerformanceGoal, catalog: TemplateCatalog,
          workers: int = 1, max_expanded: int = 5_000_000) -> Strategy:
    """Retrain ``strategy`` for the stricter ``new_goal`` by re-solving its
    retained sample workloads with the recorded costs as heuristic."""
    if catalog.fingerprint() != strategy.fingerprint:
        raise ValidationError("strategy was trained for a different catalog")
    if not same_variant(new_goal, strategy.goal):
        raise ValidationError("adaptation needs a goal of the same metric variant")
    if not is_tighter(new_goal, strategy.goal):
        raise ValidationError("adaptation only tightens goals; train looser goals from scratch")
    spec = spec_of(strategy, catalog, new_goal, workers)
    workloads = [make_workload(w) for w in strategy.workloads]
    recs = strategy.records or [None] * len(workloads)
    jobs = [(i, w, catalog, new_goal, recs[i], max_expanded,
             strategy.goal if recs[i] is None else None, spec.canonical)
            for i, w in enumerate(workloads)]
    return _build(spec, new_goal, workloads, _run_all(jobs, workers))


# ---------------------------------------------------------------------------
# cost estimation
# ---------------------------------------------------------------------------


def attribute_costs(schedule: Schedule, catalog: TemplateCatalog, goal: PerformanceGoal) -> dict:
    """Cost charged to each query (instance id -> $).  A VM's start-up,
    processing and penalty are split over its queries in proportion to their
    effective latency.  Per-query goals charge each VM its own queries'
    violations; for average and percentile goals the schedule's penalty is
    split over VMs in proportion to their busy time."""
    times = completion_times(schedule, catalog)
    per_query = isinstance(goal, (MaxLatency, PerQuery))
    total_pen = 0.0 if per_query else penalty(goal, schedule, catalog)
    busy = [sum(effective_latency(q, vm.type_id, catalog) for q in vm.queue) for vm in schedule.vms]
    all_busy = sum(busy)
    out = {}
    for vm, b in zip(schedule.vms, busy):
        vt = catalog.vm_type(vm.type_id)
        cost = vt.startup_cost + vt.rent_rate * b
        if per_query:
            for q in vm.queue:
                dl = goal.deadline_for(catalog.template(q.template_id).base_id)
                cost += goal.penalty_rate * max(0.0, times[q.instance_id][1] - dl)
        elif all_busy > 0:
            cost += total_pen * b / all_busy
        for q in vm.queue:
            out[q.instance_id] = cost * effective_latency(q, vm.type_id, catalog) / b
    return out


def cost_vector(strategy: Strategy, catalog: TemplateCatalog, size: int = 1000,
                seed: int = 0) -> dict:
    w = _cost_workload(catalog, size, seed)
    s = schedule_batch(strategy, w, catalog)
    per = attribute_costs(s, catalog, strategy.goal)
    sums = {t: 0.0 for t in catalog.template_ids}
    counts = {t: 0 for t in catalog.template_ids}
    for q in w:
        sums[q.template_id] += per[q.instance_id]
        counts[q.template_id] += 1
    # a template absent from the sample gets 0 (only possible for tiny sizes)
    return {t: sums[t] / counts[t] if counts[t] else 0.0 for t in catalog.template_ids}


def estimate_cost(strategy: Strategy, counts: Mapping[int, int]) -> float:
    total = 0.0
    for t, c in counts.items():
        if t not in strategy.cost_vector:
            raise ValidationError(f"unknown template {t}")
        if c < 0:
            raise ValueError("counts must be >= 0")
        total += c * strategy.cost_vector[t]
    return total


def emd(a: Sequence[float], b: Sequence[float]) -> float:
    """1-D earth mover's distance between two cost vectors, each normalised to
    unit mass, with unit ground distance between adjacent templates."""
    if len(a) != len(b):
        raise ValueError("cost vectors differ in length")
    if any(x < 0 for x in a) or any(x < 0 for x in b):
        raise ValueError("cost vectors must be non-negative")
    sa, sb = sum(a), sum(b)
    if sa == 0 or sb == 0:
        return 0.0
    run = total = 0.0
    for x, y in zip(a, b):
        run += x / sa - y / sb
        total += abs(run)
    return total


def _vec(st: Strategy) -> list[float]:
    return [st.cost_vector[t] for t in sorted(st.cost_vector)]


# ---------------------------------------------------------------------------
# strategy tiers
# ---------------------------------------------------------------------------


def tier_goals(goal: PerformanceGoal, catalog: TemplateCatalog, n_tiers: int,
               step: float | None = None) -> list[PerformanceGoal]:
    """``n_tiers`` goals from loosest to strictest with ``goal`` in the middle,
    spaced by equal steps of the tightening fraction ``p``.  The default step
    reaches the strictest reachable constraint at the strict end."""
    if n_tiers < 1:
        raise ValueError("n_tiers must be >= 1")
    mid = (n_tiers - 1) // 2
    strict = n_tiers - 1 - mid
    if step is None:
        step = 1.0 / (strict + 1) if strict else 0.0
    t = strictest_constraint(goal, catalog)
    return [tighten_goal(goal, (i - mid) * step, t) for i in range(n_tiers)]


def prune_tiers(vectors: Sequence[Sequence[float]], k: int) -> tuple[list[int], list[float]]:
    """Indices kept after repeatedly dropping tier ``i + 1`` for the adjacent
    pair with the smallest EMD (first pair on ties), and the removed EMDs."""
    if not 1 <= k <= len(vectors):
        raise ValueError("need 1 <= k <= n_tiers")
    keep = list(range(len(vectors)))
    removed = []
    while len(keep) > k:
        d = [emd(vectors[keep[i]], vectors[keep[i + 1]]) for i in range(len(keep) - 1)]
        i = min(range(len(d)), key=lambda j: (d[j], j))
        removed.append(d[i])
        del keep[i + 1]
    return keep, removed


def build_tiers(spec: TrainingSpec, n_tiers: int, step: float | None = None) -> list[Strategy]:
    """A strategy per tier.  The user goal (median tier) is trained fully and
    adapted outward to the stricter tiers; the loosest tier is trained from
    scratch and adapted inward to the looser tiers; adaptation only ever
    tightens."""
    goals = tier_goals(spec.goal, spec.catalog, n_tiers, step)
    mid = (n_tiers - 1) // 2
    out: list[Strategy | None] = [None] * n_tiers
    out[mid] = train(spec)
    for i in range(mid + 1, n_tiers):
        out[i] = adapt(out[i - 1], goals[i], spec.catalog, spec.workers, spec.max_expanded)
    if mid > 0:
        out[0] = train(replace(spec, goal=goals[0]))
        for i in range(1, mid):
            out[i] = adapt(out[i - 1], goals[i], spec.catalog, spec.workers, spec.max_expanded)
    return out


def recommend(spec: TrainingSpec, n_tiers: int, k: int, step: float | None = None) -> list[Strategy]:
    """``k`` strategies, loosest first, chosen so adjacent tiers differ as much
    as possible in their per-template cost profile."""
    if not 1 <= k <= n_tiers:
        raise ValueError("need 1 <= k <= n_tiers")
    tiers = build_tiers(spec, n_tiers, step)
    keep, _ = prune_tiers([_vec(s) for s in tiers], k)
    return [tiers[i] for i in keep]
