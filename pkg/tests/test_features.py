import io

import pytest

from slasched.core import MaxLatency, make_workload
from slasched.features import (
    INF_COST,
    TrainingSample,
    action_label,
    action_order,
    extract,
    feature_names,
    harvest,
    parse_action,
    read_csv,
    write_csv,
)
from slasched.graph import Place, Provision, SchedulingGraph
from slasched.search import astar


def walk(g, actions):
    v = g.start()
    for a in actions:
        v = g.apply(v, a)
    return v


def fv(fix1, v):
    return dict(zip(feature_names(fix1), extract(v)))


def test_names(fix1):
    assert feature_names(fix1) == ["wait_time", "proportion_T1", "supports_T1", "cost_of_T1", "have_T1",
                                   "proportion_T2", "supports_T2", "cost_of_T2", "have_T2"]


def test_proportions(fix1):
    g = SchedulingGraph(make_workload([1, 2, 2, 2, 2]), fix1, MaxLatency(deadline=10_000.0))
    v = walk(g, [Provision(1), Place(1), Place(2), Place(2), Place(2)])
    f = fv(fix1, v)
    assert f["proportion_T1"] == 0.25 and f["proportion_T2"] == 0.75


def test_start_vertex_features(fix1, fix1_goal):
    g = SchedulingGraph(make_workload([1, 2]), fix1, fix1_goal)
    f = fv(fix1, g.start())
    assert f["wait_time"] == 0.0
    assert f["proportion_T1"] == f["proportion_T2"] == 0.0
    assert f["supports_T1"] == f["supports_T2"] == 0.0
    assert f["cost_of_T1"] == f["cost_of_T2"] == INF_COST


def test_after_one_placement(fix1, fix1_goal, fix1_workload):
    g = SchedulingGraph(fix1_workload, fix1, fix1_goal)
    f = fv(fix1, walk(g, [Provision(1), Place(2)]))
    assert f["wait_time"] == 60.0
    assert f["have_T2"] == 1.0 and f["have_T1"] == 1.0
    assert f["supports_T2"] == 1.0
    # a second T2 would finish at 120 s, 60 s past its deadline
    assert f["cost_of_T2"] == pytest.approx(round(60 * 0.052 / 3600 + 0.6, 10))
    g2 = SchedulingGraph(make_workload([2]), fix1, fix1_goal)
    assert fv(fix1, walk(g2, [Provision(1), Place(2)]))["have_T2"] == 0.0


def test_harvest_counts(fix1, fix1_goal, fix1_workload):
    assert len(harvest(astar(make_workload([1]), fix1, fix1_goal).path)) == 2
    samples = harvest(astar(fix1_workload, fix1, fix1_goal).path)
    assert len(samples) == 7
    assert sum(isinstance(s.label, Provision) for s in samples) == 3
    assert harvest([]) == []


def test_labels_roundtrip(fix1, fix1_goal, fix1_workload):
    for a in (Place(3), Provision(2)):
        assert parse_action(action_label(a)) == a
    assert sorted([Provision(1), Place(2), Place(1)], key=action_order) == [Place(1), Place(2), Provision(1)]
    with pytest.raises(ValueError):
        parse_action("jump:1")
    samples = harvest(astar(fix1_workload, fix1, fix1_goal).path)
    buf = io.StringIO()
    write_csv(samples, fix1, buf)
    assert buf.getvalue().splitlines()[0].endswith(",action")
    buf.seek(0)
    assert read_csv(buf) == samples
    assert isinstance(samples[0], TrainingSample)
