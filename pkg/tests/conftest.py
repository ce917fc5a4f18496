import sys

import pytest

from slasched.core import (
    MaxLatency,
    PerQuery,
    Query,
    QueryTemplate,
    TemplateCatalog,
    VMType,
)

RENT = 0.052 / 3600.0
STARTUP = 0.0008


def one_type(latencies, deadlines=None, startup=STARTUP, rent=RENT):
    ids = list(range(1, len(latencies) + 1))
    dl = deadlines or [None] * len(ids)
    return TemplateCatalog([VMType(1, startup, rent, frozenset(ids))],
                           [QueryTemplate(i, {1: float(l)}, d) for i, l, d in zip(ids, latencies, dl)])


@pytest.fixture
def fix1():
    return one_type([120, 60], [180, 60])


@pytest.fixture
def fix1_goal():
    return PerQuery(deadlines={1: 180.0, 2: 60.0})


@pytest.fixture
def fix1_workload():
    # q1 is the T1 instance, q2..q4 are T2
    return [Query(1, 1), Query(2, 2), Query(2, 3), Query(2, 4)]


@pytest.fixture
def three_tpl():
    return one_type([240, 180, 120])


@pytest.fixture
def makespan_goal():
    return MaxLatency(deadline=540.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
