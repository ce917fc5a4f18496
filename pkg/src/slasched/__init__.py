"""Learned, SLA-aware scheduling of query workloads on rented VMs."""

from .core import (
    AverageLatency,
    MaxLatency,
    PerQuery,
    Percentile,
    Query,
    QueryTemplate,
    Schedule,
    TemplateCatalog,
    VM,
    VMType,
    ValidationError,
    total_cost,
)
from .search import astar
from .advisor import Strategy, TrainingSpec, adapt, recommend, train
from .runtime import schedule_batch

__all__ = [
    "AverageLatency", "MaxLatency", "PerQuery", "Percentile", "Query", "QueryTemplate",
    "Schedule", "TemplateCatalog", "VM", "VMType", "ValidationError", "total_cost",
    "astar", "Strategy", "TrainingSpec", "adapt", "recommend", "train", "schedule_batch",
]

__version__ = "0.1.0"
