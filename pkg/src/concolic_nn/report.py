"""Per-input attack records and batch aggregates, serialized as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

TIMING_FIELDS = ("wall_time", "solver_time_mean", "mean_success_time", "mean_time")


@dataclass
class AttackRecord:
    input_id: str
    pixels: int
    selection: str
    order: str
    outcome: str
    original_class: int | None
    selected: list[int] = field(default_factory=list)
    adversarial_class: int | None = None
    changes: list[dict[str, float]] = field(default_factory=list)
    iterations: int = 0
    sat: int = 0
    unsat: int = 0
    unknown: int = 0
    constraints_per_iteration: list[int] = field(default_factory=list)
    constraints_mean: float = 0.0
    solver_time_mean: float = 0.0
    query_size_mean: float = 0.0
    divergent_replays: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    wall_time: float = 0.0
    adversarial_file: str | None = None
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.outcome == "adversarial-found"


def aggregate(records: Sequence[AttackRecord]) -> dict[str, Any]:
    """ATK % and timing means; success time is averaged over successes only."""
    attempted = len(records)
    wins = [r for r in records if r.success]
    return {
        "attempted": attempted,
        "successes": len(wins),
        "atk_percent": 100.0 * len(wins) / attempted if attempted else 0.0,
        "mean_success_time": sum(r.wall_time for r in wins) / len(wins) if wins else 0.0,
        "mean_time": sum(r.wall_time for r in records) / attempted if attempted else 0.0,
        "sat_total": sum(r.sat for r in records),
        "unsat_total": sum(r.unsat for r in records),
        "unknown_total": sum(r.unknown for r in records),
    }


def attack_report(records: Sequence[AttackRecord], settings: dict[str, Any]) -> dict[str, Any]:
    return {
        "kind": "attack",
        "settings": settings,
        "records": [asdict(r) for r in records],
        "aggregate": aggregate(records),
    }


def escalation_report(stages: Sequence[dict[str, Any]], total: int, settings: dict[str, Any]) -> dict[str, Any]:
    return {"kind": "escalate", "settings": settings, "total_inputs": total, "stages": list(stages)}


def records_from(doc: dict[str, Any]) -> list[AttackRecord]:
    return [AttackRecord(**r) for r in doc["records"]]


def write_report(doc: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def read_report(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def strip_timing(doc: Any) -> Any:
    """Copy of a report with wall-clock fields removed, for determinism checks."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k not in TIMING_FIELDS}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc
