"""Procedural generation of schema-organized rearrangement scenes.

Goal scenes place every object in a container according to one of the four
schemas; initial states are derived by removing random objects onto the
work surface.  Generation is a pure function of the configuration: every
scene draws its randomness from a sub-seed derived from (seed, split,
schema, ordinal), so datasets are byte-identical across reruns and safe to
generate in parallel.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .groupings import GroupingTable, SchemaId, builtin_grouping_tables
from .scene import (
    SURFACE,
    ReceptacleId,
    SceneState,
    move_object,
    scene_from_record,
    scene_to_record,
)

DEFAULT_SEEN = (
    "aluminum_foil", "basket_ball", "book", "bottle", "bowl", "bread",
    "candle", "cloth", "cup", "dish_sponge", "dumbbell", "egg",
    "hand_towel", "kettle", "laptop", "lettuce", "newspaper", "pen",
    "plate", "pot", "potato", "scrub_brush", "soap_dispenser", "spoon",
    "toilet_paper", "tomato", "towel", "wine_bottle",
)
DEFAULT_UNSEEN = (
    "apple", "box", "ladle", "mug", "pan", "paper_towel_roll",
    "pencil", "spray_bottle", "vase", "watering_can",
)

SPLIT_NAMES = ("train", "val", "test_seen", "test_unseen")


class DatasetError(Exception):
    pass


class VocabularyTooSmall(DatasetError):
    pass


class RemovalCountOutOfRange(DatasetError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    seed: int = 17
    train_per_schema: int = 1980
    val_per_schema: int = 110
    test_per_schema: int = 110
    unseen_total: int = 120
    seen_categories: tuple[str, ...] = DEFAULT_SEEN
    unseen_categories: tuple[str, ...] = DEFAULT_UNSEEN
    objects_per_scene: tuple[int, int] = (6, 14)
    containers_per_scene: tuple[int, int] = (2, 4)
    duplicates_per_category: tuple[int, int] = (1, 3)
    removal_fraction: tuple[float, float] = (0.2, 0.8)
    schemas: tuple[SchemaId, ...] = tuple(SchemaId)

    def validate(self) -> None:
        for name in ("train_per_schema", "val_per_schema", "test_per_schema", "unseen_total"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be non-negative")
        for name in ("objects_per_scene", "containers_per_scene", "duplicates_per_category"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise DatasetError(f"{name} range ({lo}, {hi}) is empty or non-positive")
        lo, hi = self.removal_fraction
        if not (0.0 < lo <= hi <= 1.0):
            raise DatasetError(f"removal_fraction range ({lo}, {hi}) must sit in (0, 1]")
        if not self.seen_categories or not self.schemas:
            raise DatasetError("need at least one seen category and one schema")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["schemas"] = [s.label for s in self.schemas]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        if "schemas" in d:
            d["schemas"] = tuple(SchemaId.parse(s) for s in d["schemas"])
        for key in ("seen_categories", "unseen_categories", "objects_per_scene",
                    "containers_per_scene", "duplicates_per_category", "removal_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ScenePair:
    initial: SceneState
    goal: SceneState
    schema: SchemaId
    scene_id: str


@dataclass
class DatasetSplits:
    train: list[ScenePair] = field(default_factory=list)
    val: list[ScenePair] = field(default_factory=list)
    test_seen: list[ScenePair] = field(default_factory=list)
    test_unseen: list[ScenePair] = field(default_factory=list)

    def split(self, name: str) -> list[ScenePair]:
        if name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)


def _semantic_goal(
    schema: SchemaId,
    rng: np.random.Generator,
    config: GenerationConfig,
    vocabulary: tuple[str, ...],
    table: GroupingTable,
) -> SceneState:
    by_group = {}
    for cat in sorted(vocabulary):
        by_group.setdefault(table.group_of(cat), []).append(cat)
    group_names = sorted(by_group)

    lo_c, hi_c = config.containers_per_scene
    max_groups = min(hi_c, len(group_names))
    if max_groups < lo_c:
        raise VocabularyTooSmall(
            f"{schema.label}: vocabulary spans {len(group_names)} groups, "
            f"need at least {lo_c}"
        )
    n_groups = int(rng.integers(lo_c, max_groups + 1))
    chosen = [group_names[i] for i in rng.choice(len(group_names), n_groups, replace=False)]

    lo_d, hi_d = config.duplicates_per_category
    lo_n, hi_n = config.objects_per_scene
    duplicates: dict[str, int] = {}
    for group in chosen:
        cats = by_group[group]
        duplicates[cats[int(rng.integers(len(cats)))]] = lo_d

    pool = [c for g in chosen for c in by_group[g] if c not in duplicates]
    order = rng.permutation(len(pool))
    pool = [pool[i] for i in order]

    target = max(int(rng.integers(lo_n, hi_n + 1)), n_groups * lo_d)
    total = sum(duplicates.values())
    while total < target:
        can_add = bool(pool) and total + lo_d <= hi_n
        bumpable = [c for c in sorted(duplicates) if duplicates[c] < hi_d]
        if can_add and (not bumpable or rng.random() < 0.5):
            duplicates[pool.pop()] = lo_d
            total += lo_d
        elif bumpable:
            duplicates[bumpable[int(rng.integers(len(bumpable)))]] += 1
            total += 1
        else:
            break

    container_of = {g: int(k) for g, k in zip(chosen, rng.permutation(n_groups))}
    placements = []
    for cat in sorted(duplicates):
        dest = ReceptacleId.container(container_of[table.group_of(cat)])
        for idx in range(duplicates[cat]):
            placements.append((cat, idx, dest))
    return SceneState.from_placements(n_groups, placements)


def _ooe_goal(
    rng: np.random.Generator, config: GenerationConfig, vocabulary: tuple[str, ...]
) -> SceneState:
    lo_c, hi_c = config.containers_per_scene
    lo_n, hi_n = config.objects_per_scene
    vocab = sorted(vocabulary)

    feasible = []
    for k in range(lo_c, hi_c + 1):
        m_lo = max(1, -(-lo_n // k))
        m_hi = min(hi_n // k, len(vocab))
        if m_lo <= m_hi:
            feasible.append((k, m_lo, m_hi))
    if not feasible:
        raise VocabularyTooSmall(
            f"one-of-everything infeasible: {len(vocab)} categories, "
            f"containers {config.containers_per_scene}, objects {config.objects_per_scene}"
        )
    k, m_lo, m_hi = feasible[int(rng.integers(len(feasible)))]
    m = int(rng.integers(m_lo, m_hi + 1))
    cats = [vocab[i] for i in rng.choice(len(vocab), m, replace=False)]

    placements = [
        (cat, j, ReceptacleId.container(j)) for cat in cats for j in range(k)
    ]
    return SceneState.from_placements(k, placements)


def generate_goal_scene(
    schema: SchemaId,
    rng: np.random.Generator,
    config: GenerationConfig,
    vocabulary: tuple[str, ...],
    tables: dict[SchemaId, GroupingTable] | None = None,
) -> SceneState:
    """Sample one fully arranged goal scene obeying the schema."""
    if not vocabulary:
        raise VocabularyTooSmall("empty vocabulary")
    if schema is SchemaId.OOE:
        return _ooe_goal(rng, config, vocabulary)
    if tables is None:
        tables = builtin_grouping_tables()
    return _semantic_goal(schema, rng, config, vocabulary, tables[schema])


def derive_initial_state(
    goal: SceneState, removal_count: int, rng: np.random.Generator
) -> SceneState:
    """Move ``removal_count`` randomly chosen objects onto the work surface."""
    movable = goal.non_null()
    if not 1 <= removal_count <= len(movable):
        raise RemovalCountOutOfRange(
            f"removal_count {removal_count} outside 1..{len(movable)}"
        )
    picked = rng.choice(len(movable), removal_count, replace=False)
    state = goal
    for i in sorted(int(p) for p in picked):
        state = move_object(state, movable[i].category, movable[i].instance_index, SURFACE)
    return state


_SPLIT_CODES = {name: i for i, name in enumerate(SPLIT_NAMES)}
_SCHEMA_CODES = {schema: i for i, schema in enumerate(SchemaId)}
_MAX_ATTEMPTS = 200


def _generate_pair(
    config: GenerationConfig,
    split: str,
    schema: SchemaId,
    ordinal: int,
    tables: dict[SchemaId, GroupingTable],
) -> ScenePair:
    if split == "test_unseen":
        vocabulary = tuple(config.seen_categories) + tuple(config.unseen_categories)
    else:
        vocabulary = tuple(config.seen_categories)
    unseen = set(config.unseen_categories)

    for attempt in range(_MAX_ATTEMPTS):
        entropy = (config.seed, _SPLIT_CODES[split], _SCHEMA_CODES[schema], ordinal, attempt)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        goal = generate_goal_scene(schema, rng, config, vocabulary, tables)
        if split == "test_unseen" and not (
            {o.category for o in goal.non_null()} & unseen
        ):
            continue
        n = len(goal.non_null())
        frac = rng.uniform(*config.removal_fraction)
        removal = min(n, max(1, round(frac * n)))
        initial = derive_initial_state(goal, removal, rng)
        # A fully emptied container erases the goal's group-to-container
        # binding and leaves the scene without a unique answer; regenerate.
        if any(
            all(o.is_null for o in initial.container_objects(k))
            for k in range(initial.n_containers)
        ):
            continue
        scene_id = f"{split}-{schema.label}-{ordinal:05d}"
        return ScenePair(initial=initial, goal=goal, schema=schema, scene_id=scene_id)
    raise DatasetError(
        f"could not generate a usable scene for {split}/{schema.label} ordinal {ordinal}"
    )


def _pair_batch(args) -> list[ScenePair]:
    config, split, schema, ordinals = args
    tables = builtin_grouping_tables()
    return [_generate_pair(config, split, schema, o, tables) for o in ordinals]


def generate_dataset(
    config: GenerationConfig,
    tables: dict[SchemaId, GroupingTable] | None = None,
    workers: int = 1,
) -> DatasetSplits:
    """Generate all four splits; deterministic in ``config`` regardless of workers."""
    config.validate()
    if tables is None:
        tables = builtin_grouping_tables()

    n_schemas = len(config.schemas)
    counts = {
        "train": config.train_per_schema,
        "val": config.val_per_schema,
        "test_seen": config.test_per_schema,
        "test_unseen": config.unseen_total // n_schemas,
    }

    splits = DatasetSplits()
    jobs = [
        (split, schema)
        for split in SPLIT_NAMES
        for schema in config.schemas
        if counts[split] > 0
    ]
    if workers > 1:
        chunked = [
            (config, split, schema, list(range(counts[split]))) for split, schema in jobs
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (split, _), pairs in zip(jobs, pool.map(_pair_batch, chunked)):
                splits.split(split).extend(pairs)
    else:
        for split, schema in jobs:
            for ordinal in range(counts[split]):
                splits.split(split).append(
                    _generate_pair(config, split, schema, ordinal, tables)
                )
    return splits


def pair_to_record(pair: ScenePair) -> dict:
    base = scene_to_record(pair.initial, pair.scene_id, pair.schema.label)
    goal = scene_to_record(pair.goal, pair.scene_id, pair.schema.label)
    return {
        "scene_id": base["scene_id"],
        "schema": base["schema"],
        "n_containers": base["n_containers"],
        "initial": base["objects"],
        "goal": goal["objects"],
    }


def pair_from_record(record: dict) -> ScenePair:
    common = {"n_containers": record["n_containers"]}
    initial = scene_from_record({**common, "objects": record["initial"]})
    goal = scene_from_record({**common, "objects": record["goal"]})
    return ScenePair(
        initial=initial,
        goal=goal,
        schema=SchemaId.parse(record["schema"]),
        scene_id=record["scene_id"],
    )


def dumps_pair(pair: ScenePair) -> str:
    return json.dumps(pair_to_record(pair), ensure_ascii=False)


def loads_pair(line: str) -> ScenePair:
    return pair_from_record(json.loads(line))


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(splits: DatasetSplits, out_dir: Path, config: GenerationConfig) -> dict:
    """Write the four split files plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {}
    counts = {}
    for name in SPLIT_NAMES:
        path = out_dir / f"{name}.jsonl"
        pairs = splits.split(name)
        with open(path, "w", encoding="utf-8") as f:
            for pair in pairs:
                f.write(dumps_pair(pair) + "\n")
        digests[f"{name}.jsonl"] = file_digest(path)
        counts[name] = len(pairs)
    manifest = {
        "config": config.to_json_dict(),
        "counts": counts,
        "digests": digests,
        "dataset_digest": hashlib.sha256(
            "".join(digests[k] for k in sorted(digests)).encode()
        ).hexdigest(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_split(data_dir: Path, name: str) -> list[ScenePair]:
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise DatasetError(f"missing split file {path}")
    with open(path, encoding="utf-8") as f:
        return [loads_pair(line) for line in f if line.strip()]


def load_manifest(data_dir: Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing dataset manifest {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)
