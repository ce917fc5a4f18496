import math

import pytest

from slasched.advisor import (
    Strategy,
    TrainingSpec,
    adapt,
    emd,
    estimate_cost,
    prune_tiers,
    recommend,
    sample_workloads,
    tier_goals,
    train,
)
from slasched.core import MaxLatency, PerQuery, ValidationError, make_workload, template_counts
from slasched.runtime import schedule_batch
from slasched.search import astar

from conftest import one_type


@pytest.fixture(scope="module")
def fix1_strategy():
    cat = one_type([120, 60], [180, 60])
    return cat, train(TrainingSpec(cat, PerQuery(deadlines={1: 180.0, 2: 60.0}), N=200, m=6, seed=0))


def test_sample_workloads(fix1):
    a = sample_workloads(fix1, 1, 4, seed=7)
    assert a == sample_workloads(fix1, 1, 4, seed=7) and len(a[0]) == 4
    single = one_type([30])
    assert all(template_counts(w) == {1: 5} for w in sample_workloads(single, 3, 5, 0))


def test_sample_frequencies_uniform(fix1):
    ws = sample_workloads(fix1, 3000, 18, seed=1)
    n = 3000 * 18
    c = template_counts(q for w in ws for q in w)
    sd = math.sqrt(n * 0.25)
    assert all(abs(c[t] - n / 2) <= 3 * sd for t in (1, 2))


def test_fix1_strategy_reproduces_walkthrough(fix1_strategy, fix1_goal):
    cat, st = fix1_strategy
    w = make_workload([1, 2, 2])
    s = schedule_batch(st, w, cat)
    assert sorted(s.template_layout()) == sorted([(1, (2, 1)), (1, (2,))])
    from slasched.core import total_cost
    assert total_cost(fix1_goal, s, cat).total == pytest.approx(astar(w, cat, fix1_goal).cost, abs=1e-12)


def test_degenerate_training(fix1, fix1_goal):
    st = train(TrainingSpec(fix1, fix1_goal, N=1, m=2, seed=0))
    assert st.tree.n_leaves >= 1 and st.n_samples >= 2


def test_strategy_json(fix1_strategy):
    cat, st = fix1_strategy
    again = Strategy.from_json(st.to_json())
    assert again.to_json() == st.to_json()
    w = make_workload([1, 2, 2, 1, 2])
    assert schedule_batch(again, w, cat) == schedule_batch(st, w, cat)


def test_adapt_identity_and_tightening():
    cat = one_type([240, 180, 120])
    g = MaxLatency(deadline=900.0)
    st = train(TrainingSpec(cat, g, N=30, m=5, seed=2))
    same = adapt(st, g, cat)
    assert same.tree.to_json() == st.tree.to_json()
    tight = MaxLatency(deadline=720.0)
    a = adapt(st, tight, cat)
    fresh = train(TrainingSpec(cat, tight, N=30, m=5, seed=2))
    assert a.n_samples == fresh.n_samples
    for w in st.workloads:
        w = make_workload(w)
        old = astar(w, cat, g, keep_record=True)
        ad = astar(w, cat, tight, heuristic="adaptive", record=old.record)
        assert abs(ad.cost - astar(w, cat, tight).cost) <= 1e-9
    with pytest.raises(ValidationError):
        adapt(st, MaxLatency(deadline=1000.0), cat)
    with pytest.raises(ValidationError):
        adapt(st, PerQuery(deadlines={1: 1.0, 2: 1.0, 3: 1.0}), cat)


def test_deadline_shift_changes_some_sample():
    # two-template catalog; moving T2's deadline up by 30 s must hurt someone
    cat = one_type([120, 60])
    g = PerQuery(deadlines={1: 300.0, 2: 130.0})
    g2 = PerQuery(deadlines={1: 300.0, 2: 100.0})
    st = train(TrainingSpec(cat, g, N=20, m=5, seed=0))
    changed = 0
    for w in st.workloads:
        w = make_workload(w)
        a, b = astar(w, cat, g), astar(w, cat, g2)
        changed += b.cost > a.cost + 1e-12 or a.schedule.template_layout() != b.schedule.template_layout()
    assert changed >= 1


def test_emd():
    assert emd([1, 2, 3], [1, 2, 3]) == 0.0
    assert emd([1, 0], [0, 1]) == 1.0
    assert emd([2, 0], [0, 2]) == 1.0


def test_estimate_cost(fix1_strategy):
    _, st = fix1_strategy
    assert estimate_cost(st, {1: 0, 2: 0}) == 0.0
    assert estimate_cost(st, {2: 1}) == st.cost_vector[2]
    assert estimate_cost(st, {1: 6, 2: 4}) == pytest.approx(2 * estimate_cost(st, {1: 3, 2: 2}))


def test_prune_tiers():
    v = [[1, 0], [1, 0], [0, 1]]
    keep, removed = prune_tiers(v, 2)
    assert keep == [0, 2] and removed == [0.0]
    assert prune_tiers(v, 3) == ([0, 1, 2], [])


def test_tier_goals_loose_to_strict(fix1):
    gs = tier_goals(MaxLatency(deadline=900.0), fix1, 5)
    ds = [g.deadline for g in gs]
    assert ds == sorted(ds, reverse=True) and ds[2] == 900.0


def test_recommend_fix1(fix1):
    spec = TrainingSpec(fix1, MaxLatency(deadline=600.0), N=30, m=4, seed=0, cost_sample_size=200)
    from slasched.advisor import build_tiers
    tiers = build_tiers(spec, 7)
    vecs = [[s.cost_vector[t] for t in sorted(s.cost_vector)] for s in tiers]
    keep, removed = prune_tiers(vecs, 3)
    # independent replay of the removal sequence
    alive = list(range(7))
    for r in removed:
        d = [emd(vecs[alive[i]], vecs[alive[i + 1]]) for i in range(len(alive) - 1)]
        assert min(d) == r
        del alive[d.index(min(d)) + 1]
    assert alive == keep
    kept = [tiers[i] for i in keep]
    out = recommend(spec, 7, 3)
    assert [s.goal for s in out] == [s.goal for s in kept]
    assert len(recommend(spec, 3, 3)) == 3
