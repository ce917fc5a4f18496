"""Desk-scale experiments shared by ``slasched bench`` and the acceptance
tests.  Every suite returns rows with the bench CSV columns."""

from __future__ import annotations

import csv
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammainc

from .advisor import Strategy, TrainingSpec, adapt, train
from .baselines import BASELINES
from .core import (
    AverageLatency,
    MaxLatency,
    PerQuery,
    Percentile,
    PerformanceGoal,
    Query,
    QueryTemplate,
    Schedule,
    TemplateCatalog,
    VMType,
    make_workload,
    strictest_constraint,
    tighten_goal,
    total_cost,
)
from .runtime import map_unknown, run_batch
from .search import astar

COLUMNS = ["metric", "method", "workload_size", "seed", "cost_usd", "optimal_cost_usd",
           "pct_over_optimal", "expanded", "wall_ms"]

RENT = 0.052 / 3600.0
STARTUP = 0.0008
PENALTY_RATE = 0.01
METRICS = ("max", "perquery", "average", "percentile")


def single_type_catalog(latencies: Sequence[float], startup: float = STARTUP,
                        rent: float = RENT) -> TemplateCatalog:
    """One VM type (id 1) running templates 1..k with the given latencies."""
    ids = range(1, len(latencies) + 1)
    return TemplateCatalog([VMType(1, startup, rent, frozenset(ids))],
                           [QueryTemplate(i, {1: float(l)}) for i, l in zip(ids, latencies)])


def fix1_catalog() -> TemplateCatalog:
    """T1 = 120 s and T2 = 60 s on one VM type; template deadlines 180 s and 60 s
    serve the ``perquery`` goal shorthand."""
    return TemplateCatalog([VMType(1, STARTUP, RENT, frozenset({1, 2}))],
                           [QueryTemplate(1, {1: 120.0}, 180.0), QueryTemplate(2, {1: 60.0}, 60.0)])


def desk_catalog() -> TemplateCatalog:
    return single_type_catalog([120, 200, 280, 360])


def desk_goal(metric: str, catalog: TemplateCatalog) -> PerformanceGoal:
    if metric == "max":
        return MaxLatency(deadline=900.0)
    if metric == "perquery":
        return PerQuery(deadlines={t.id: 3 * catalog.min_latency(t.id) for t in catalog.templates})
    if metric == "average":
        return AverageLatency(target=600.0)
    if metric == "percentile":
        return Percentile(fraction=0.9, deadline=600.0)
    raise ValueError(f"unknown metric {metric!r}")


def random_catalog(rng: random.Random, n_templates: int = 2, n_vm_types: int = 1) -> TemplateCatalog:
    """Small random catalog for oracle checks: latencies 30..300 s; a second
    VM type is faster and dearer."""
    vms = [VMType(1, STARTUP, RENT, frozenset(range(1, n_templates + 1)))]
    speed = [1.0]
    if n_vm_types > 1:
        vms.append(VMType(2, STARTUP * 1.5, RENT * 2, frozenset(range(1, n_templates + 1))))
        speed.append(0.6)
    tpls = []
    for i in range(1, n_templates + 1):
        l = rng.randint(30, 300)
        tpls.append(QueryTemplate(i, {v.id: round(l * s, 3) for v, s in zip(vms, speed)}))
    return TemplateCatalog(vms, tpls)


def random_goal(metric: str, catalog: TemplateCatalog, rng: random.Random) -> PerformanceGoal:
    """Goal loose enough to be met sometimes and missed sometimes."""
    lat = [catalog.min_latency(t) for t in catalog.template_ids]
    if metric == "max":
        return MaxLatency(deadline=rng.uniform(1.0, 3.0) * max(lat))
    if metric == "perquery":
        return PerQuery(deadlines={t: rng.uniform(1.0, 4.0) * catalog.min_latency(t)
                                   for t in catalog.template_ids})
    if metric == "average":
        return AverageLatency(target=rng.uniform(1.0, 2.5) * sum(lat) / len(lat))
    if metric == "percentile":
        return Percentile(fraction=rng.choice([0.5, 0.75, 0.8, 0.9]),
                          deadline=rng.uniform(1.0, 3.0) * max(lat))
    raise ValueError(metric)


def random_workload(catalog: TemplateCatalog, n: int, rng: random.Random) -> list[Query]:
    return make_workload(rng.choices(list(catalog.template_ids), k=n))


def test_workloads(catalog: TemplateCatalog, count: int, size: int, seed: int) -> list[list[Query]]:
    rng = random.Random(f"test-{seed}-{size}")
    return [random_workload(catalog, size, rng) for _ in range(count)]


def write_rows(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in COLUMNS})


def _row(metric, method, size, seed, cost, opt=None, expanded=None, wall=0.0):
    pct = "" if opt in (None, "") or opt == 0 else 100.0 * (cost - opt) / opt
    return {"metric": metric, "method": method, "workload_size": size, "seed": seed,
            "cost_usd": cost, "optimal_cost_usd": "" if opt is None else opt,
            "pct_over_optimal": pct, "expanded": "" if expanded is None else expanded,
            "wall_ms": round(wall * 1000.0, 3)}


def _optimum(args):
    w, catalog, goal = args
    t = time.perf_counter()
    r = astar(w, catalog, goal)
    return r.cost, r.expanded, time.perf_counter() - t


def _map(fn: Callable, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class Trained:
    metric: str
    catalog: TemplateCatalog
    goal: PerformanceGoal
    strategy: Strategy
    seconds: float


def train_desk(metric: str, N: int = 300, m: int = 10, seed: int = 0, workers: int = 1,
               catalog: TemplateCatalog | None = None, goal: PerformanceGoal | None = None) -> Trained:
    catalog = catalog or desk_catalog()
    goal = goal or desk_goal(metric, catalog)
    t = time.perf_counter()
    st = train(TrainingSpec(catalog, goal, N=N, m=m, seed=seed, workers=workers))
    return Trained(metric, catalog, goal, st, time.perf_counter() - t)


def learned_cost(tr: Trained, w) -> tuple[float, float, int]:
    t = time.perf_counter()
    run = run_batch(tr.strategy, w, tr.catalog)
    return total_cost(tr.goal, run.schedule, tr.catalog).total, time.perf_counter() - t, run.walks


def suite_optimality(trained: dict, count: int = 20, size: int = 15, seed: int = 0,
                     workers: int = 1, baselines: bool = True) -> list[dict]:
    """Learned model (and baselines) against the A* optimum."""
    rows = []
    for metric, tr in trained.items():
        ws = test_workloads(tr.catalog, count, size, seed)
        opts = _map(_optimum, [(w, tr.catalog, tr.goal) for w in ws], workers)
        for w, (opt, exp, wall) in zip(ws, opts):
            rows.append(_row(metric, "optimal", size, seed, opt, opt, exp, wall))
            c, wall, _ = learned_cost(tr, w)
            rows.append(_row(metric, "learned", size, seed, c, opt, None, wall))
            if baselines:
                for name, fn in BASELINES.items():
                    t = time.perf_counter()
                    s = fn(w, tr.catalog, tr.goal)
                    rows.append(_row(metric, name, size, seed,
                                     total_cost(tr.goal, s, tr.catalog).total, opt, None,
                                     time.perf_counter() - t))
    return rows


def suite_heuristics(trained: dict, count: int = 10, size: int = 200, seed: int = 0) -> list[dict]:
    """Learned model against FFD, FFI and Pack9 on workloads too large for A*."""
    rows = []
    for metric, tr in trained.items():
        for w in test_workloads(tr.catalog, count, size, seed):
            c, wall, _ = learned_cost(tr, w)
            rows.append(_row(metric, "learned", size, seed, c, None, None, wall))
            for name, fn in BASELINES.items():
                t = time.perf_counter()
                s = fn(w, tr.catalog, tr.goal)
                rows.append(_row(metric, name, size, seed, total_cost(tr.goal, s, tr.catalog).total,
                                 None, None, time.perf_counter() - t))
    return rows


def suite_throughput(trained: dict, size: int = 30_000, seed: int = 0) -> list[dict]:
    rows = []
    for metric, tr in trained.items():
        w = test_workloads(tr.catalog, 1, size, seed)[0]
        c, wall, walks = learned_cost(tr, w)
        rows.append(_row(metric, "learned", size, seed, c, None, walks, wall))
    return rows


def suite_adaptive(trained: dict, p: float = 1.0 / 3.0, seed: int = 0) -> list[dict]:
    """Cost and expansions of adapting each strategy to a tighter goal, and
    of solving the same samples from scratch with the null heuristic."""
    rows = []
    for metric, tr in trained.items():
        g2 = tighten_goal(tr.goal, p, strictest_constraint(tr.goal, tr.catalog))
        t = time.perf_counter()
        st2 = adapt(tr.strategy, g2, tr.catalog)
        rows.append(_row(metric, "adapt", tr.strategy.spec.get("m", ""), seed, 0.0, None,
                         st2.expanded, time.perf_counter() - t))
        t = time.perf_counter()
        st3 = train(TrainingSpec(tr.catalog, g2, N=tr.strategy.spec["N"], m=tr.strategy.spec["m"],
                                 seed=tr.strategy.spec["seed"]))
        rows.append(_row(metric, "retrain", tr.strategy.spec.get("m", ""), seed, 0.0, None,
                         st3.expanded, time.perf_counter() - t))
    return rows


# ---------------------------------------------------------------------------
# skewed and noisy workloads
# ---------------------------------------------------------------------------


class UnreachableSkew(ValueError):
    pass


def chi2_confidence(stat: float, dof: int) -> float:
    """P(X <= stat) for a chi-squared variable with ``dof`` degrees of freedom."""
    if dof < 1:
        return 0.0
    return float(gammainc(dof / 2.0, max(stat, 0.0) / 2.0))


def chi2_uniform(counts: Sequence[int]) -> float:
    n, k = sum(counts), len(counts)
    if n == 0 or k == 0:
        return 0.0
    e = n / k
    return sum((c - e) ** 2 for c in counts) / e


def _apportion(n: int, probs: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * probs``; ties go to the lower index."""
    raw = [n * p for p in probs]
    out = [int(math.floor(x)) for x in raw]
    rest = n - sum(out)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[:rest]:
        out[i] += 1
    return out


def skewed_counts(n: int, template_ids: Sequence[int], skew: float, rng: random.Random) -> dict[int, int]:
    """Per-template counts whose chi-squared statistic against the uniform
    mix sits at confidence ``skew``.  Frequencies move along the line from
    uniform to a single (randomly picked) dominant template."""
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must be in [0, 1]")
    tids = list(template_ids)
    k = len(tids)
    if n == 0:
        return {t: 0 for t in tids}
    top = rng.randrange(k)
    dof = k - 1

    def probs(a):
        return [(1 - a) / k + (a if i == top else 0.0) for i in range(k)]

    if k == 1 or skew == 0.0:
        alpha = 0.0
    elif skew == 1.0:
        alpha = 1.0
    else:
        if chi2_confidence(n * dof, dof) < skew:
            raise UnreachableSkew(f"skew {skew} is out of reach for n={n} and {k} templates")
        lo, hi = 0.0, 1.0
        for _ in range(100):
            mid = (lo + hi) / 2
            if chi2_confidence(n * mid * mid * dof, dof) < skew:
                lo = mid
            else:
                hi = mid
        alpha = hi
    return dict(zip(tids, _apportion(n, probs(alpha))))


def skewed_workload(catalog: TemplateCatalog, n: int, skew: float, seed: int) -> list[Query]:
    rng = random.Random(f"gen-{seed}")
    counts = skewed_counts(n, catalog.template_ids, skew, rng)
    tids = [t for t, c in counts.items() for _ in range(c)]
    rng.shuffle(tids)
    return make_workload(tids)


def reference_latency(catalog: TemplateCatalog, tid: int) -> float:
    """Latency on the lowest-id VM type that runs the template."""
    for v in sorted(catalog.vm_types, key=lambda v: v.id):
        if tid in v.supports:
            return catalog.latency(tid, v.id)
    raise ValueError(f"no VM type runs template {tid}")


def perturb(workload: Sequence[Query], catalog: TemplateCatalog, sigma: float,
            seed: int) -> list[tuple[Query, float]]:
    """Each query with a raw latency ``l * (1 + N(0, sigma))``, kept positive."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, 1.0, len(workload)) if sigma > 0 else np.zeros(len(workload))
    out = []
    for q, e in zip(workload, z):
        l = reference_latency(catalog, q.template_id)
        out.append((q, max(l * (1.0 + sigma * float(e)), 1e-6 * l)))
    return out


def misassignment_rate(noisy: Sequence[tuple[Query, float]], catalog: TemplateCatalog) -> float:
    if not noisy:
        return 0.0
    wrong = sum(map_unknown(raw, catalog) != q.template_id for q, raw in noisy)
    return wrong / len(noisy)


def suite_skew(trained: dict, skews=(0.0, 0.5, 0.9, 0.99, 1.0), count: int = 5,
               size: int = 200, seed: int = 0) -> list[dict]:
    """Learned model and baselines as the template mix drifts from uniform."""
    rows = []
    for metric, tr in trained.items():
        for s in skews:
            for j in range(count):
                w = skewed_workload(tr.catalog, size, s, seed * 1000 + j)
                c, wall, _ = learned_cost(tr, w)
                rows.append(_row(metric, f"learned:skew={s:g}", size, seed * 1000 + j, c, None, None, wall))
                for name, fn in BASELINES.items():
                    t = time.perf_counter()
                    sch = fn(w, tr.catalog, tr.goal)
                    rows.append(_row(metric, f"{name}:skew={s:g}", size, seed * 1000 + j,
                                     total_cost(tr.goal, sch, tr.catalog).total, None, None,
                                     time.perf_counter() - t))
    return rows


def suite_noise(trained: dict, sigmas=(0.0, 0.1, 0.2, 0.3, 0.4), count: int = 5,
                size: int = 200, seed: int = 0) -> list[dict]:
    """Schedules built from re-bucketed noisy latencies, costed with the true
    templates; the reference column is the noise-free schedule."""
    rows = []
    for metric, tr in trained.items():
        for w in test_workloads(tr.catalog, count, size, seed):
            clean, _, _ = learned_cost(tr, w)
            for s in sigmas:
                noisy = perturb(w, tr.catalog, s, seed)
                seen = [Query(map_unknown(raw, tr.catalog), q.instance_id) for q, raw in noisy]
                truth = {q.instance_id: q for q in w}
                t = time.perf_counter()
                sch = run_batch(tr.strategy, seen, tr.catalog).schedule
                wall = time.perf_counter() - t
                real = Schedule.from_lists([(vm.type_id, [truth[q.instance_id] for q in vm.queue])
                                            for vm in sch.vms])
                rows.append(_row(metric, f"learned:sigma={s:g}", size, seed,
                                 total_cost(tr.goal, real, tr.catalog).total, clean, None, wall))
    return rows


SUITES = ("optimality", "heuristics", "throughput", "adaptive", "skew", "noise")
