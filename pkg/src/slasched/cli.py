"""Command-line front end: ``slasched <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from . import experiments as ex
from .advisor import Strategy, TrainingError, TrainingSpec, adapt, build_tiers, prune_tiers, train
from .baselines import BASELINES
from .config import ConfigError, Config, Training, goal_from_string, load_config
from .core import Query, Schedule, TemplateCatalog, ValidationError, completion_times, total_cost
from .graph import to_dot
from .learn import TreeParams
from .runtime import (
    OnlineState,
    read_trace,
    run_batch,
    simulate,
    write_outcome,
    write_trace,
)
from .search import SearchLimitExceeded, astar

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 2, 3, 4

BUILTIN = {"desk": ex.desk_catalog, "fix1": ex.fix1_catalog}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> Config:
    src = args.config or "desk"
    if src in BUILTIN:
        cfg = Config(BUILTIN[src](), None, Training())
    else:
        cfg = load_config(src)
    goal = cfg.goal
    if getattr(args, "goal", None):
        goal = goal_from_string(args.goal, cfg.catalog)
    return Config(cfg.catalog, goal, cfg.training)


def _need_goal(cfg: Config):
    if cfg.goal is None:
        raise ConfigError("no performance goal: pass --goal or put one in the config")
    return cfg.goal


@contextmanager
def _out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


def _read_workload(path, catalog: TemplateCatalog) -> list[Query]:
    with open(path, newline="") as fh:
        qs = read_trace(fh, catalog)
    for q in qs:
        catalog.template(q.template_id)
    return qs


def _load_strategy(path) -> Strategy:
    try:
        return Strategy.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read strategy {path}: {e}") from None


def _spec(cfg: Config, args, goal) -> TrainingSpec:
    t = cfg.training
    return TrainingSpec(
        cfg.catalog, goal,
        N=args.samples if args.samples is not None else t.samples,
        m=args.queries if args.queries is not None else t.queries_per_sample,
        seed=args.seed if args.seed is not None else t.seed,
        tree=TreeParams(min_leaf=t.min_leaf, max_depth=t.max_depth, criterion=t.criterion),
        cost_sample_size=t.cost_sample_size, workers=args.workers)


def write_schedule(fh, schedule: Schedule, catalog: TemplateCatalog) -> None:
    w = csv.writer(fh)
    w.writerow(["vm_index", "vm_type", "position", "query", "template_id", "start_s", "finish_s"])
    times = completion_times(schedule, catalog)
    for i, vm in enumerate(schedule.vms):
        for j, q in enumerate(vm.queue):
            s, f = times[q.instance_id]
            w.writerow([i, vm.type_id, j, q.instance_id, q.template_id, s, f])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    try:
        w = ex.skewed_workload(cfg.catalog, args.n, args.skew, args.seed or 0)
    except ex.UnreachableSkew as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    with _out(args.out) as fh:
        write_trace(fh, [(0, q.template_id, None) for q in w])
    counts = [sum(q.template_id == t for q in w) for t in cfg.catalog.template_ids]
    x2 = ex.chi2_uniform(counts)
    print(f"chi2={x2:.4f} confidence={ex.chi2_confidence(x2, len(counts) - 1):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_noise(args) -> int:
    cfg = _config(args)
    w = _read_workload(args.workload, cfg.catalog)
    noisy = ex.perturb(w, cfg.catalog, args.sigma, args.seed or 0)
    with _out(args.out) as fh:
        write_trace(fh, [(q.arrival_time, q.template_id, raw) for q, raw in noisy])
    print(f"misassignment_rate={ex.misassignment_rate(noisy, cfg.catalog):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    st = train(_spec(cfg, args, _need_goal(cfg)))
    with _out(args.out) as fh:
        fh.write(st.to_json())
    print(f"samples={st.n_samples} leaves={st.tree.n_leaves} height={st.tree.height}", file=sys.stderr)
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    st = _load_strategy(args.strategy)
    try:
        new = adapt(st, _need_goal(cfg), cfg.catalog, args.workers)
    except ValidationError as e:
        # wrong catalog or a goal that is not a tightening: bad input
        raise ConfigError(str(e)) from None
    with _out(args.out) as fh:
        fh.write(new.to_json())
    print(f"expanded={new.expanded}", file=sys.stderr)
    return EXIT_OK


def cmd_recommend(args) -> int:
    cfg = _config(args)
    spec = _spec(cfg, args, _need_goal(cfg))
    tiers = build_tiers(spec, args.tiers, args.step)
    keep, _ = prune_tiers([[s.cost_vector[t] for t in sorted(s.cost_vector)] for s in tiers], args.k)
    tids = sorted(cfg.catalog.template_ids)
    with _out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow(["tier", "goal"] + [f"usd_per_query_t{t}" for t in tids])
        for rank, i in enumerate(keep):
            st = tiers[i]
            w.writerow([rank, json.dumps(st.goal.to_dict(), sort_keys=True)]
                       + [st.cost_vector[t] for t in tids])
    if args.save_dir:
        d = Path(args.save_dir)
        d.mkdir(parents=True, exist_ok=True)
        for rank, i in enumerate(keep):
            (d / f"tier{rank}.json").write_text(tiers[i].to_json())
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = _config(args)
    w = _read_workload(args.workload, cfg.catalog)
    if args.method == "learned":
        if not args.strategy:
            raise ConfigError("--method learned needs --strategy")
        st = _load_strategy(args.strategy)
        goal = cfg.goal or st.goal
        sch = run_batch(st, w, cfg.catalog).schedule
    elif args.method == "optimal":
        goal = _need_goal(cfg)
        sch = astar(w, cfg.catalog, goal, max_expanded=args.max_expanded).schedule
    else:
        goal = _need_goal(cfg)
        sch = BASELINES[args.method](w, cfg.catalog, goal)
    with _out(args.out) as fh:
        write_schedule(fh, sch, cfg.catalog)
    if args.dot:
        Path(args.dot).write_text(to_dot(w, cfg.catalog, goal))
    c = total_cost(goal, sch, cfg.catalog)
    print(f"vms={len(sch)} cost_usd={c.total:.6f} penalty_usd={c.penalty:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_online(args) -> int:
    cfg = _config(args)
    st = _load_strategy(args.strategy)
    arrivals = _read_workload(args.trace, cfg.catalog)
    state = OnlineState(st, cfg.catalog, mode=args.mode, epsilon=args.epsilon, workers=args.workers,
                        retrain_spec=_spec(cfg, args, st.goal))
    res = simulate(state, arrivals)
    with _out(args.out) as fh:
        write_outcome(fh, res)
    print(f"cost_usd={res.total:.6f} penalty_usd={res.penalty:.6f} vms={len(state.vms)} "
          f"cache_hits={state.cache.hits} cache_misses={state.cache.misses}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    metrics = args.metrics.split(",") if args.metrics else list(ex.METRICS)
    for m in metrics:
        if m not in ex.METRICS:
            raise ConfigError(f"unknown metric {m!r}")
    suites = ex.SUITES if args.suite == "all" else [args.suite]
    seed = args.seed or 0
    trained = {}
    for m in metrics:
        goal = cfg.goal if cfg.goal is not None and len(metrics) == 1 else None
        tr = ex.train_desk(m, N=args.samples or 300, m=args.queries or 10, seed=seed,
                           workers=args.workers, catalog=cfg.catalog, goal=goal)
        trained[m] = tr
        print(f"trained {m} in {tr.seconds:.1f}s", file=sys.stderr)
    out = Path(args.out or "bench")
    out.mkdir(parents=True, exist_ok=True)
    for s in suites:
        if s == "optimality":
            rows = ex.suite_optimality(trained, args.count or 20, args.size or 15, seed, args.workers)
        elif s == "heuristics":
            rows = ex.suite_heuristics(trained, args.count or 10, args.size or 200, seed)
        elif s == "throughput":
            rows = ex.suite_throughput(trained, args.size or 30_000, seed)
        elif s == "adaptive":
            rows = ex.suite_adaptive(trained, seed=seed)
        elif s == "skew":
            rows = ex.suite_skew(trained, count=args.count or 5, size=args.size or 200, seed=seed)
        else:
            rows = ex.suite_noise(trained, count=args.count or 5, size=args.size or 200, seed=seed)
        path = out / f"{s}.csv"
        with open(path, "w", newline="") as fh:
            ex.write_rows(rows, fh)
        print(f"wrote {path} ({len(rows)} rows)", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file, or a built-in catalog: desk, fix1")
    common.add_argument("--goal", help="goal JSON or shorthand, e.g. max:900, percentile:0.9:600")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="output file (directory for bench); '-' for stdout")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--samples", type=int, help="number of training workloads N")
    training.add_argument("--queries", type=int, help="queries per training workload m")

    p = argparse.ArgumentParser(prog="slasched", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a (skewed) workload file")
    g.add_argument("-n", type=int, required=True)
    g.add_argument("--skew", type=float, default=0.0, help="chi-squared confidence in [0, 1]")
    g.set_defaults(fn=cmd_gen)

    n = sub.add_parser("noise", parents=[common], help="add latency noise to a workload file")
    n.add_argument("workload")
    n.add_argument("--sigma", type=float, required=True, help="std. dev. as a fraction of latency")
    n.set_defaults(fn=cmd_noise)

    t = sub.add_parser("train", parents=[common, training], help="train a strategy")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("adapt", parents=[common], help="adapt a strategy to a tighter goal")
    a.add_argument("strategy")
    a.set_defaults(fn=cmd_adapt)

    r = sub.add_parser("recommend", parents=[common, training], help="table of strategy tiers")
    r.add_argument("--tiers", type=int, default=5)
    r.add_argument("-k", type=int, default=3)
    r.add_argument("--step", type=float, default=None)
    r.add_argument("--save-dir", help="also write the kept strategies here")
    r.set_defaults(fn=cmd_recommend)

    s = sub.add_parser("schedule", parents=[common], help="schedule a batch workload")
    s.add_argument("workload")
    s.add_argument("--method", default="learned", choices=["learned", "optimal", *BASELINES])
    s.add_argument("--strategy")
    s.add_argument("--max-expanded", type=int, default=5_000_000)
    s.add_argument("--dot", help="write the scheduling graph as DOT (small workloads only)")
    s.set_defaults(fn=cmd_schedule)

    o = sub.add_parser("online", parents=[common, training], help="replay an arrival trace")
    o.add_argument("strategy")
    o.add_argument("trace")
    o.add_argument("--mode", default="auto", choices=["auto", "shift", "retrain"])
    o.add_argument("--epsilon", type=float, default=1.0, help="wait quantisation (s)")
    o.set_defaults(fn=cmd_online)

    b = sub.add_parser("bench", parents=[common, training], help="desk-scale experiments")
    b.add_argument("--suite", default="optimality", choices=["all", *ex.SUITES])
    b.add_argument("--metrics", help="comma-separated subset of " + ",".join(ex.METRICS))
    b.add_argument("--count", type=int, help="workloads per cell")
    b.add_argument("--size", type=int, help="queries per workload")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SearchLimitExceeded, TrainingError, MemoryError) as e:
        print(f"resource cap: {e}", file=sys.stderr)
        return EXIT_LIMIT
    except (ValidationError, KeyError) as e:
        print(f"unschedulable: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
