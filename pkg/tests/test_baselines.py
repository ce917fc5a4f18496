from slasched.baselines import ffd, ffi, pack9, pack9_order
from slasched.core import MaxLatency, Schedule, make_workload, total_cost

from conftest import one_type


def test_fix1(fix1, fix1_goal, fix1_workload):
    assert len(ffd(fix1_workload, fix1, fix1_goal)) == 4
    s = ffi(fix1_workload, fix1, fix1_goal)
    assert sorted(s.template_layout()) == sorted([(1, (2, 1)), (1, (2,)), (1, (2,))])
    assert total_cost(fix1_goal, s, fix1).penalty == 0.0


def test_ffd_makespan(three_tpl, makespan_goal):
    s = ffd(make_workload([1, 1, 2, 2, 3, 3]), three_tpl, makespan_goal)
    assert [q for _, q in s.template_layout()] == [(1, 1), (2, 2, 3), (3,)]


def test_trivial(fix1, fix1_goal):
    for fn in (ffd, ffi, pack9):
        assert len(fn(make_workload([2]), fix1, fix1_goal)) == 1
        assert fn([], fix1, fix1_goal) == Schedule()


def test_pack9():
    cat = one_type([10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170, 180,
                    190, 200])
    w = make_workload(range(1, 21))
    order = [q.template_id for q in pack9_order(w, cat)]
    assert order == list(range(1, 10)) + [20] + list(range(10, 19)) + [19]
    g = MaxLatency(deadline=900.0)
    few = make_workload([3, 1, 2, 5])
    assert pack9(few, cat, g) == ffi(few, cat, g)
