"""Evaluation metrics and report rendering for rearrangement predictions.

Two numbers summarize a run: the success rate (fraction of scenes whose
predicted goal matches ground truth exactly, i.e. edit distance zero) and
the mean nonzero edit distance over the failures only, with its population
standard deviation.  Reports break both down per schema in a fixed column
order and render as structured JSON or a plain markdown table.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .dataset import ScenePair
from .groupings import REPORT_ORDER, SchemaId
from .scene import SceneState, scene_edit_distance

logger = logging.getLogger(__name__)


class MetricsError(Exception):
    pass


class EmptyRecordSet(MetricsError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    """Outcome of one scene: edit distance between prediction and goal.

    ``sed`` never exceeds ``n_unarranged`` for a well-behaved predictor (it
    can misplace at most the objects it places); predictor exceptions are
    scored at that worst case and flagged ``failed``.
    """

    scene_id: str
    schema: SchemaId
    sed: int
    n_unarranged: int
    failed: bool = False

    def to_json_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "schema": self.schema.label,
            "sed": self.sed,
            "n_unarranged": self.n_unarranged,
            "failed": self.failed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalRecord":
        return cls(
            scene_id=d["scene_id"],
            schema=SchemaId.parse(d["schema"]),
            sed=int(d["sed"]),
            n_unarranged=int(d["n_unarranged"]),
            failed=bool(d.get("failed", False)),
        )


@dataclass(frozen=True)
class GroupMetrics:
    count: int
    success_rate: float
    nsed_mean: float | None
    nsed_sd: float | None


@dataclass(frozen=True)
class EvalReport:
    records: tuple[EvalRecord, ...]
    per_schema: dict[SchemaId, GroupMetrics]
    overall: GroupMetrics


def success_rate(records: Sequence[EvalRecord]) -> float:
    """Fraction of records with edit distance zero."""
    if not records:
        raise EmptyRecordSet("success rate over zero records is undefined")
    return sum(1 for r in records if r.sed == 0) / len(records)


def avg_nonzero_sed(records: Sequence[EvalRecord]) -> tuple[float, float] | None:
    """Mean and population SD of sed over the failing records (sed > 0);
    None when every record succeeded.  Summation is sequential on purpose:
    the report values must be reproducible to the bit from the plain
    summation formulas, independent of any vectorized reduction order."""
    failures = [r.sed for r in records if r.sed > 0]
    if not failures:
        return None
    mean = sum(failures) / len(failures)
    variance = sum((s - mean) ** 2 for s in failures) / len(failures)
    return float(mean), math.sqrt(variance)


def _group_metrics(records: Sequence[EvalRecord]) -> GroupMetrics:
    nsed = avg_nonzero_sed(records)
    return GroupMetrics(
        count=len(records),
        success_rate=success_rate(records),
        nsed_mean=None if nsed is None else nsed[0],
        nsed_sd=None if nsed is None else nsed[1],
    )


def build_report(records: Sequence[EvalRecord]) -> EvalReport:
    if not records:
        raise EmptyRecordSet("cannot build a report from zero records")
    per_schema = {}
    for schema in REPORT_ORDER:
        subset = [r for r in records if r.schema == schema]
        if subset:
            per_schema[schema] = _group_metrics(subset)
    return EvalReport(
        records=tuple(records),
        per_schema=per_schema,
        overall=_group_metrics(records),
    )


def n_unarranged(state: SceneState) -> int:
    return sum(1 for o in state.surface_objects() if not o.is_null)


def evaluate_model(
    predictor: Callable[[SceneState], SceneState],
    pairs: Sequence[ScenePair],
) -> EvalReport:
    """Run the predictor over every pair and aggregate edit distances.

    A predictor exception does not abort the run: the scene is scored at
    the worst case (sed = number of unarranged objects) and flagged.
    """
    if not pairs:
        raise EmptyRecordSet("evaluation requires at least one scene")
    records = []
    for pair in pairs:
        unarranged = n_unarranged(pair.initial)
        try:
            predicted = predictor(pair.initial)
            sed = scene_edit_distance(predicted, pair.goal)
            failed = False
        except Exception:
            logger.warning("predictor failed on %s; scoring worst case", pair.scene_id,
                           exc_info=True)
            sed = unarranged
            failed = True
        records.append(EvalRecord(
            scene_id=pair.scene_id,
            schema=pair.schema,
            sed=sed,
            n_unarranged=unarranged,
            failed=failed,
        ))
    return build_report(records)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _metrics_json(m: GroupMetrics) -> dict:
    return {
        "count": m.count,
        "success_rate": m.success_rate,
        "nsed_mean": m.nsed_mean,
        "nsed_sd": m.nsed_sd,
    }


def render_report(report: EvalReport, fmt: str = "structured") -> str:
    """Render as structured JSON (round-trips via parse_report) or as a
    markdown table in the fixed schema column order."""
    if fmt == "structured":
        doc = {
            "per_schema": {
                schema.label: _metrics_json(report.per_schema[schema])
                for schema in REPORT_ORDER if schema in report.per_schema
            },
            "overall": _metrics_json(report.overall),
            "records": [r.to_json_dict() for r in report.records],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "markdown":
        def row(name: str, m: GroupMetrics) -> str:
            if m.nsed_mean is None:
                nsed = "-"
            else:
                nsed = f"{m.nsed_mean:.2f} (SD={m.nsed_sd:.2f})"
            return f"| {name} | {m.count} | {100.0 * m.success_rate:.1f}% | {nsed} |"

        lines = [
            "| Schema | Scenes | Success rate | Avg nonzero SED |",
            "| --- | --- | --- | --- |",
        ]
        for schema in REPORT_ORDER:
            if schema in report.per_schema:
                lines.append(row(schema.label, report.per_schema[schema]))
        lines.append(row("overall", report.overall))
        return "\n".join(lines) + "\n"
    raise MetricsError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> EvalReport:
    """Inverse of the structured rendering."""
    doc = json.loads(text)
    records = [EvalRecord.from_json_dict(d) for d in doc["records"]]
    return build_report(records)


def write_records(records: Sequence[EvalRecord], path) -> None:
    """Per-scene audit file, one JSON record per line."""
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")
