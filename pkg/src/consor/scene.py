"""Symbolic rearrangement scenes and the scene edit distance.

A scene is a set of object instances, each sitting in a receptacle: either
the shared work surface or one of a fixed number of containers.  Empty
containers are marked with a reserved ``null`` placeholder instance so that
every receptacle is represented in the state.  States are immutable values;
transitions return new states.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

NULL_CATEGORY = "null"


class SceneError(Exception):
    """Base class for scene-level failures."""


class UnknownInstance(SceneError):
    pass


class UnknownReceptacle(SceneError):
    pass


class IncompatibleScenes(SceneError):
    pass


class ReceptacleKind(Enum):
    SURFACE = "surface"
    CONTAINER = "container"


@dataclass(frozen=True)
class ReceptacleId:
    """The work surface, or a 0-based container slot."""

    kind: ReceptacleKind
    index: int = -1

    @classmethod
    def surface(cls) -> "ReceptacleId":
        return cls(ReceptacleKind.SURFACE, -1)

    @classmethod
    def container(cls, index: int) -> "ReceptacleId":
        if index < 0:
            raise UnknownReceptacle(f"container index must be >= 0, got {index}")
        return cls(ReceptacleKind.CONTAINER, index)

    @property
    def is_surface(self) -> bool:
        return self.kind is ReceptacleKind.SURFACE

    @property
    def position(self) -> int:
        """Canonical slot number: surface is 0, container k is k + 1."""
        return 0 if self.is_surface else self.index + 1

    def encode(self) -> str:
        return "T" if self.is_surface else f"C{self.index}"

    @classmethod
    def parse(cls, text: str) -> "ReceptacleId":
        if text == "T":
            return cls.surface()
        if text.startswith("C") and text[1:].isdigit():
            return cls.container(int(text[1:]))
        raise UnknownReceptacle(f"unparseable receptacle {text!r}")

    def __repr__(self) -> str:
        return self.encode()


SURFACE = ReceptacleId.surface()


@dataclass(frozen=True)
class ObjectInstance:
    """One object in a scene, identified by (category, instance_index)."""

    category: str
    instance_index: int
    receptacle: ReceptacleId

    @property
    def is_null(self) -> bool:
        return self.category == NULL_CATEGORY

    @property
    def key(self) -> tuple[str, int]:
        return (self.category, self.instance_index)

    def sort_key(self) -> tuple[int, str, int]:
        return (self.receptacle.position, self.category, self.instance_index)

    def __repr__(self) -> str:
        return f"{self.category}#{self.instance_index}@{self.receptacle.encode()}"


@dataclass(frozen=True)
class SceneState:
    """Immutable set of object instances plus the container count.

    ``objects`` is kept in canonical order (receptacle slot, category,
    instance index) so that equality, serialization, and token layouts are
    all deterministic.
    """

    objects: tuple[ObjectInstance, ...]
    n_containers: int

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.objects, key=ObjectInstance.sort_key))
        object.__setattr__(self, "objects", ordered)

    @classmethod
    def from_placements(
        cls,
        n_containers: int,
        placements: Iterable[tuple[str, int, ReceptacleId]],
    ) -> "SceneState":
        """Build a state from non-null placements, adding null markers."""
        objects = [
            ObjectInstance(category, index, receptacle)
            for category, index, receptacle in placements
        ]
        occupied = {o.receptacle.index for o in objects if not o.receptacle.is_surface}
        for k in range(n_containers):
            if k not in occupied:
                objects.append(
                    ObjectInstance(NULL_CATEGORY, 0, ReceptacleId.container(k))
                )
        return cls(tuple(objects), n_containers)

    @property
    def size(self) -> int:
        return len(self.objects)

    def non_null(self) -> tuple[ObjectInstance, ...]:
        return tuple(o for o in self.objects if not o.is_null)

    def surface_objects(self) -> tuple[ObjectInstance, ...]:
        return tuple(o for o in self.objects if o.receptacle.is_surface and not o.is_null)

    def container_objects(self, index: int) -> tuple[ObjectInstance, ...]:
        r = ReceptacleId.container(index)
        return tuple(o for o in self.objects if o.receptacle == r)

    def receptacles(self) -> Iterator[ReceptacleId]:
        yield SURFACE
        for k in range(self.n_containers):
            yield ReceptacleId.container(k)

    def find(self, category: str, instance_index: int) -> ObjectInstance | None:
        for o in self.objects:
            if not o.is_null and o.key == (category, instance_index):
                return o
        return None

    def category_multiset(self) -> Counter:
        return Counter(o.category for o in self.non_null())


def validate_state(state: SceneState) -> list[str]:
    """Check all state invariants; returns one message per violation."""
    violations: list[str] = []
    if state.n_containers < 1:
        violations.append(f"n_containers must be positive, got {state.n_containers}")

    seen_keys: set[tuple[str, int]] = set()
    per_category: dict[str, list[int]] = {}
    for o in state.objects:
        if not o.receptacle.is_surface and not (0 <= o.receptacle.index < state.n_containers):
            violations.append(f"{o!r} references nonexistent receptacle {o.receptacle.encode()}")
        if o.is_null:
            if o.instance_index != 0:
                violations.append(f"null instance {o!r} must have instance_index 0")
            if o.receptacle.is_surface:
                violations.append("null instance placed on the work surface")
            continue
        if o.key in seen_keys:
            violations.append(f"duplicate instance key {o.key}")
        seen_keys.add(o.key)
        per_category.setdefault(o.category, []).append(o.instance_index)

    for category, indices in per_category.items():
        if sorted(indices) != list(range(len(indices))):
            violations.append(
                f"instance indices for {category!r} not contiguous from 0: {sorted(indices)}"
            )

    for k in range(state.n_containers):
        contents = state.container_objects(k)
        nulls = [o for o in contents if o.is_null]
        non_nulls = [o for o in contents if not o.is_null]
        if not non_nulls and len(nulls) != 1:
            violations.append(f"empty container {k} holds {len(nulls)} null markers, expected 1")
        if non_nulls and nulls:
            violations.append(f"occupied container {k} still holds a null marker")

    return violations


def move_object(
    state: SceneState, category: str, instance_index: int, dest: ReceptacleId
) -> SceneState:
    """Move one non-null instance to ``dest``, rebalancing null markers."""
    target = state.find(category, instance_index)
    if target is None:
        raise UnknownInstance(f"no instance ({category!r}, {instance_index}) in scene")
    if not dest.is_surface and not (0 <= dest.index < state.n_containers):
        raise UnknownReceptacle(
            f"destination {dest.encode()} does not exist (n_containers={state.n_containers})"
        )
    moved = [
        ObjectInstance(category, instance_index, dest) if o == target else o
        for o in state.objects
        if not o.is_null
    ]
    return SceneState.from_placements(
        state.n_containers, [(o.category, o.instance_index, o.receptacle) for o in moved]
    )


def category_histogram(state: SceneState) -> dict[tuple[str, ReceptacleId], int]:
    """Counts of non-null instances per (category, receptacle)."""
    counts: Counter = Counter()
    for o in state.non_null():
        counts[(o.category, o.receptacle)] += 1
    return dict(counts)


def scene_edit_distance(a: SceneState, b: SceneState) -> int:
    """Minimum number of displacements turning arrangement ``a`` into ``b``.

    Same-category instances are interchangeable, so the distance reduces to
    the one-sided difference of the (category, receptacle) histograms.
    """
    if a.n_containers != b.n_containers:
        raise IncompatibleScenes(
            f"container counts differ: {a.n_containers} vs {b.n_containers}"
        )
    if a.category_multiset() != b.category_multiset():
        raise IncompatibleScenes("category multisets differ")
    hist_a = category_histogram(a)
    hist_b = category_histogram(b)
    return sum(
        max(0, count - hist_b.get(key, 0)) for key, count in hist_a.items()
    )


def scene_to_record(state: SceneState, scene_id: str, schema: str) -> dict:
    """One-scene record; null markers are dropped and rebuilt on load."""
    return {
        "scene_id": scene_id,
        "schema": schema,
        "n_containers": state.n_containers,
        "objects": [
            {
                "category": o.category,
                "instance_index": o.instance_index,
                "receptacle": o.receptacle.encode(),
            }
            for o in state.non_null()
        ],
    }


def scene_from_record(record: dict) -> SceneState:
    return SceneState.from_placements(
        record["n_containers"],
        [
            (obj["category"], obj["instance_index"], ReceptacleId.parse(obj["receptacle"]))
            for obj in record["objects"]
        ],
    )


def dumps_scene(state: SceneState, scene_id: str, schema: str) -> str:
    return json.dumps(scene_to_record(state, scene_id, schema), ensure_ascii=False)


def loads_scene(line: str) -> tuple[SceneState, str, str]:
    record = json.loads(line)
    return scene_from_record(record), record["scene_id"], record["schema"]
