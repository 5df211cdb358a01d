"""Organizational schemas and the category-to-group tables behind them.

Three schemas (class, utility, affordance) group categories by a shipped
lookup table; the one-of-everything schema is structural and has no table.
Tables are plain TSV files, one ``category<TAB>group`` line per category.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources

from .scene import SceneState


class GroupingError(Exception):
    pass


class SchemaId(Enum):
    CLASS = "class"
    UTILITY = "utility"
    AFFORDANCE = "affordance"
    OOE = "ooe"

    @property
    def label(self) -> str:
        return self.value

    @property
    def has_table(self) -> bool:
        return self is not SchemaId.OOE

    @classmethod
    def parse(cls, text: str) -> "SchemaId":
        for schema in cls:
            if schema.value == text.lower():
                return schema
        raise GroupingError(f"unknown schema {text!r}")


# Paper-style presentation order for reports.
REPORT_ORDER = (SchemaId.CLASS, SchemaId.UTILITY, SchemaId.OOE, SchemaId.AFFORDANCE)


@dataclass(frozen=True)
class GroupingTable:
    schema: SchemaId
    groups: dict[str, str]

    def group_of(self, category: str) -> str:
        try:
            return self.groups[category]
        except KeyError:
            raise GroupingError(
                f"category {category!r} missing from {self.schema.label} table"
            ) from None

    def categories_by_group(self) -> dict[str, tuple[str, ...]]:
        by_group: dict[str, list[str]] = {}
        for category in sorted(self.groups):
            by_group.setdefault(self.groups[category], []).append(category)
        return {g: tuple(cats) for g, cats in sorted(by_group.items())}

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(sorted(self.groups))


def parse_grouping_table(text: str, schema: SchemaId) -> GroupingTable:
    if not schema.has_table:
        raise GroupingError("the one-of-everything schema has no grouping table")
    groups: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise GroupingError(f"line {lineno}: expected 'category<TAB>group', got {raw!r}")
        category, group = parts[0].strip(), parts[1].strip()
        if category in groups:
            raise GroupingError(f"line {lineno}: duplicate category {category!r}")
        groups[category] = group
    if not groups:
        raise GroupingError("empty grouping table")
    return GroupingTable(schema, groups)


def load_grouping_table(path, schema: SchemaId) -> GroupingTable:
    with open(path, encoding="utf-8") as f:
        return parse_grouping_table(f.read(), schema)


def builtin_grouping_tables() -> dict[SchemaId, GroupingTable]:
    """The tables shipped with the package (38 household categories)."""
    tables = {}
    for schema in (SchemaId.CLASS, SchemaId.UTILITY, SchemaId.AFFORDANCE):
        ref = resources.files("consor.data.groupings") / f"{schema.label}.tsv"
        tables[schema] = parse_grouping_table(ref.read_text(encoding="utf-8"), schema)
    return tables


def verify_schema_consistency(
    goal: SceneState,
    schema: SchemaId,
    tables: dict[SchemaId, GroupingTable] | None = None,
) -> bool:
    """Check that a goal arrangement obeys its schema.

    Table-backed schemas require container contents to partition exactly by
    group label: one group per container and one container per present group.
    One-of-everything requires every present category to appear exactly once
    in every container.  Non-null objects on the work surface always fail
    (a goal arrangement has everything put away).
    """
    if goal.surface_objects():
        return False

    contents = [
        [o for o in goal.container_objects(k) if not o.is_null]
        for k in range(goal.n_containers)
    ]

    if schema is SchemaId.OOE:
        categories = {o.category for o in goal.non_null()}
        for held in contents:
            counts: dict[str, int] = {}
            for o in held:
                counts[o.category] = counts.get(o.category, 0) + 1
            if set(counts) != categories or any(c != 1 for c in counts.values()):
                return False
        return bool(categories)

    if tables is None:
        tables = builtin_grouping_tables()
    table = tables[schema]
    labels_per_container: list[str] = []
    for k, held in enumerate(contents):
        if not held:
            return False
        labels = {table.group_of(o.category) for o in held}
        if len(labels) != 1:
            return False
        labels_per_container.append(labels.pop())
    return len(set(labels_per_container)) == goal.n_containers
