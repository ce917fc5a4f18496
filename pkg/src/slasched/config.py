"""Strict JSON configuration: catalog, goal and optional training settings.

Rent rates are quoted per hour in files and stored per second in memory.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .core import (
    AverageLatency,
    MaxLatency,
    PerQuery,
    Percentile,
    PerformanceGoal,
    QueryTemplate,
    TemplateCatalog,
    VMType,
    ValidationError,
)


class ConfigError(ValidationError):
    pass


def _check_keys(d, required, optional, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"{where}: missing {', '.join(missing)}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _num(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where}: expected a number")
    return float(x)


def _int(x, where):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(f"{where}: expected an integer")
    return x


def catalog_from_dict(d: dict) -> TemplateCatalog:
    vms = []
    for i, v in enumerate(d.get("vm_types") or []):
        w = f"vm_types[{i}]"
        _check_keys(v, ["id", "startup_cost_usd", "rent_usd_per_hour", "supports"], [], w)
        vms.append(VMType(_int(v["id"], w + ".id"), _num(v["startup_cost_usd"], w),
                          _num(v["rent_usd_per_hour"], w) / 3600.0,
                          frozenset(_int(s, w + ".supports") for s in v["supports"])))
    tpls = []
    for i, t in enumerate(d.get("templates") or []):
        w = f"templates[{i}]"
        _check_keys(t, ["id", "latency_s_by_vmtype"], ["deadline_s", "base"], w)
        lat = t["latency_s_by_vmtype"]
        if not isinstance(lat, dict):
            raise ConfigError(f"{w}.latency_s_by_vmtype: expected an object")
        try:
            lat = {int(k): _num(x, w) for k, x in lat.items()}
        except ValueError:
            raise ConfigError(f"{w}.latency_s_by_vmtype: keys must be VM type ids") from None
        dl = _num(t["deadline_s"], w) if "deadline_s" in t else None
        base = _int(t["base"], w) if "base" in t else None
        tpls.append(QueryTemplate(_int(t["id"], w + ".id"), lat, dl, base))
    return TemplateCatalog(vms, tpls)


def goal_from_dict(d: dict, catalog: TemplateCatalog | None = None) -> PerformanceGoal:
    _check_keys(d, ["variant"], ["params", "penalty_usd_per_s"], "goal")
    params = d.get("params", {})
    rate = _num(d.get("penalty_usd_per_s", 0.01), "goal.penalty_usd_per_s")
    kind = d["variant"]
    if kind == "max":
        _check_keys(params, ["deadline_s"], [], "goal.params")
        return MaxLatency(deadline=_num(params["deadline_s"], "goal"), penalty_rate=rate)
    if kind == "perquery":
        _check_keys(params, [], ["deadlines_s"], "goal.params")
        if "deadlines_s" in params:
            dl = {int(k): _num(v, "goal") for k, v in params["deadlines_s"].items()}
        else:
            if catalog is None:
                raise ConfigError("perquery goal without deadlines needs template deadlines")
            dl = {t.id: t.deadline for t in catalog.templates if t.base is None}
            if any(v is None for v in dl.values()):
                raise ConfigError("perquery goal: some templates have no deadline_s")
        return PerQuery(deadlines=dl, penalty_rate=rate)
    if kind == "average":
        _check_keys(params, ["target_s"], [], "goal.params")
        return AverageLatency(target=_num(params["target_s"], "goal"), penalty_rate=rate)
    if kind == "percentile":
        _check_keys(params, ["fraction", "deadline_s"], [], "goal.params")
        return Percentile(fraction=_num(params["fraction"], "goal"),
                          deadline=_num(params["deadline_s"], "goal"), penalty_rate=rate)
    raise ConfigError(f"goal: unknown variant {kind!r}")


@dataclass(frozen=True)
class Training:
    samples: int = 3000
    queries_per_sample: int = 18
    seed: int = 0
    min_leaf: int = 2
    max_depth: int | None = None
    criterion: str = "gain_ratio"
    cost_sample_size: int = 1000


_TRAINING_KEYS = ["samples", "queries_per_sample", "seed", "min_leaf", "max_depth", "criterion",
                  "cost_sample_size"]


@dataclass(frozen=True)
class Config:
    catalog: TemplateCatalog
    goal: PerformanceGoal | None
    training: Training


def config_from_dict(d: dict) -> Config:
    _check_keys(d, ["vm_types", "templates"], ["goal", "training"], "config")
    try:
        catalog = catalog_from_dict(d)
        goal = goal_from_dict(d["goal"], catalog) if "goal" in d else None
    except ConfigError:
        raise
    except ValidationError as e:
        raise ConfigError(str(e)) from None
    tr = d.get("training", {})
    _check_keys(tr, [], _TRAINING_KEYS, "training")
    try:
        training = Training(**tr)
    except TypeError as e:
        raise ConfigError(f"training: {e}") from None
    return Config(catalog, goal, training)


def load_config(path: str | Path) -> Config:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return config_from_dict(d)


def goal_from_string(s: str, catalog: TemplateCatalog | None = None) -> PerformanceGoal:
    """Parse ``--goal``: either inline JSON or ``variant:value`` shorthands
    such as ``max:900``, ``average:600``, ``percentile:0.9:600``."""
    s = s.strip()
    if s.startswith("{"):
        try:
            return goal_from_dict(json.loads(s), catalog)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad goal JSON: {e}") from None
    parts = s.split(":")
    try:
        if parts[0] == "max" and len(parts) == 2:
            return MaxLatency(deadline=float(parts[1]))
        if parts[0] == "average" and len(parts) == 2:
            return AverageLatency(target=float(parts[1]))
        if parts[0] == "percentile" and len(parts) == 3:
            return Percentile(fraction=float(parts[1]), deadline=float(parts[2]))
        if parts[0] == "perquery" and len(parts) == 1:
            return goal_from_dict({"variant": "perquery"}, catalog)
        if parts[0] == "perquery" and len(parts) == 2:
            # perquery:<factor> = factor x each template's fastest latency
            if catalog is None:
                raise ConfigError("perquery:<factor> needs a catalog")
            f = float(parts[1])
            return PerQuery(deadlines={t.id: f * catalog.min_latency(t.id)
                                       for t in catalog.templates if t.base is None})
    except ValidationError as e:
        raise ConfigError(str(e)) from None
    except ValueError:
        pass
    raise ConfigError(f"cannot parse goal {s!r}")
