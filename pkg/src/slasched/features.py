"""Feature vectors describing a scheduling decision point.

For a vertex the vector is ``wait_time`` followed by four entries per
template X, in catalog order: ``proportion_X``, ``supports_X``, ``cost_of_X``
and ``have_X``.  Booleans are encoded as 0/1 and an unavailable placement cost
as :data:`INF_COST`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import PerformanceGoal, TemplateCatalog
from .graph import Action, Place, Provision, Vertex

# Stand-in for "no such placement"; larger than any reachable cost.
INF_COST = 1e18
# Features are rounded so that summation-order noise never becomes a split.
DIGITS = 10


def feature_names(catalog: TemplateCatalog) -> list[str]:
    names = ["wait_time"]
    for t in catalog.template_ids:
        names += [f"proportion_T{t}", f"supports_T{t}", f"cost_of_T{t}", f"have_T{t}"]
    return names


def action_label(a: Action) -> str:
    if isinstance(a, Place):
        return f"place:{a.template_id}"
    return f"provision:{a.vm_type_id}"


def parse_action(s: str) -> Action:
    kind, _, x = s.partition(":")
    if kind == "place":
        return Place(int(x))
    if kind == "provision":
        return Provision(int(x))
    raise ValueError(f"bad action label {s!r}")


def action_order(a: Action) -> tuple[int, int]:
    """Total order on actions: placements by template id, then provisions by
    VM type id.  Used to break label ties."""
    if isinstance(a, Place):
        return (0, a.template_id)
    return (1, a.vm_type_id)


def extract_state(ctx, head_type, head_counts, head_len, head_wait, acc,
                  unassigned) -> list[float]:
    """Feature vector from raw scheduler state.

    ``ctx`` supplies ``lat[vm][i]`` (latency of template index ``i``, None
    when unsupported), ``rent[vm]`` and ``tids``.  ``head_counts[i]`` is the
    number of template ``i`` queries on the head VM and ``unassigned[i]`` the
    number still to place.
    """
    out = [float(head_wait)]
    row = ctx.lat[head_type] if head_type is not None else None
    tids = ctx.tids
    for i, left in enumerate(unassigned):
        prop = head_counts[i] / head_len if head_len else 0.0
        have = 1.0 if left else 0.0
        l = row[i] if row is not None else None
        if l is None:
            out += [round(prop, DIGITS), 0.0, INF_COST, have]
        else:
            # place-edge weight, computed even when no instance is left
            w = ctx.rent[head_type] * l + acc.delta(head_wait + l, tids[i])
            out += [round(prop, DIGITS), 1.0, round(w, DIGITS), have]
    out[0] = round(out[0], DIGITS)
    return out


def extract(v: Vertex, catalog: TemplateCatalog | None = None,
            goal: PerformanceGoal | None = None) -> list[float]:
    """Features of graph vertex ``v`` (catalog and goal come from its graph)."""
    g = v.graph
    idx = g.catalog.template_index
    counts = [0] * len(g.tids)
    for t in v.head:
        counts[idx[t]] += 1
    return extract_state(g, v.head_type, counts, len(v.head), v.head_wait, v.acc, v.unassigned)


@dataclass(frozen=True)
class TrainingSample:
    features: tuple
    label: Action


def harvest(path: Sequence[tuple[Vertex, Action]], catalog: TemplateCatalog | None = None,
            goal: PerformanceGoal | None = None) -> list[TrainingSample]:
    """One sample per edge of an optimal path."""
    return [TrainingSample(tuple(extract(v)), a) for v, a in path]


def write_csv(samples: Iterable[TrainingSample], catalog: TemplateCatalog, fh) -> None:
    w = csv.writer(fh)
    w.writerow(feature_names(catalog) + ["action"])
    for s in samples:
        w.writerow([repr(x) for x in s.features] + [action_label(s.label)])


def read_csv(fh) -> list[TrainingSample]:
    r = csv.reader(fh)
    next(r)
    return [TrainingSample(tuple(float(x) for x in row[:-1]), parse_action(row[-1])) for row in r]
