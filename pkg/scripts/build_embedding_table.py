#!/usr/bin/env python3
"""Regenerate the shipped 50-d category embedding table.

Each category is described by a hand-authored set of semantic attributes:
its group label under each of the three table-backed schemas, a few physical
"texture" traits, and a small idiosyncratic component.  Every attribute maps
to a fixed random unit direction (seeded), and a category vector is the
weighted, L2-normalized sum of its attribute directions.  Categories that
share semantics end up close in cosine space, which is what the encoder
relies on for zero-shot placement of categories never seen in training.

Output is word2vec text format, consumed by consor.embeddings.

Usage:
    python scripts/build_embedding_table.py [--out PATH]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

DIM = 50
SEED = 902140
GROUP_WEIGHT = 1.0
TEXTURE_WEIGHT = 0.5
IDIO_WEIGHT = 0.35

REPO_ROOT = Path(__file__).resolve().parent.parent
GROUPINGS_DIR = REPO_ROOT / "src" / "consor" / "data" / "groupings"
DEFAULT_OUT = REPO_ROOT / "src" / "consor" / "data" / "embeddings" / "categories_50d.txt"

# Physical traits, independent of any grouping.
TEXTURES = {
    "aluminum_foil": ("metal", "sheet"),
    "apple": ("organic", "round"),
    "basket_ball": ("rubber", "round"),
    "book": ("paper", "flat"),
    "bottle": ("tall", "vessel"),
    "bowl": ("round", "vessel"),
    "box": ("hollow", "paper"),
    "bread": ("organic", "soft"),
    "candle": ("flame", "wax"),
    "cloth": ("fabric", "soft"),
    "cup": ("small", "vessel"),
    "dish_sponge": ("porous", "soft"),
    "dumbbell": ("heavy", "metal"),
    "egg": ("fragile", "organic"),
    "hand_towel": ("fabric", "soft"),
    "kettle": ("metal", "spout", "vessel"),
    "ladle": ("long_handle", "metal"),
    "laptop": ("electronic", "flat"),
    "lettuce": ("leafy", "organic"),
    "mug": ("small", "vessel"),
    "newspaper": ("paper", "sheet"),
    "pan": ("long_handle", "metal", "shallow"),
    "paper_towel_roll": ("paper", "roll"),
    "pen": ("long_thin", "plastic"),
    "pencil": ("long_thin", "wood"),
    "plate": ("ceramic", "flat"),
    "pot": ("metal", "vessel"),
    "potato": ("organic", "round"),
    "scrub_brush": ("bristles", "long_handle"),
    "soap_dispenser": ("plastic", "spout"),
    "spoon": ("long_handle", "metal"),
    "spray_bottle": ("plastic", "spout"),
    "toilet_paper": ("paper", "roll"),
    "tomato": ("organic", "round"),
    "towel": ("fabric", "soft"),
    "vase": ("ceramic", "vessel"),
    "watering_can": ("spout", "vessel"),
    "wine_bottle": ("glass", "tall", "vessel"),
}


def load_groups(name: str) -> dict[str, str]:
    groups = {}
    for line in (GROUPINGS_DIR / f"{name}.tsv").read_text().splitlines():
        if line.strip():
            category, group = line.split("\t")
            groups[category] = group
    return groups


def build_vectors() -> dict[str, np.ndarray]:
    tables = {name: load_groups(name) for name in ("class", "utility", "affordance")}
    categories = sorted(TEXTURES)
    for name, table in tables.items():
        missing = set(categories) ^ set(table)
        if missing:
            raise SystemExit(f"{name} table out of sync with texture grid: {missing}")

    attributes: dict[str, list[tuple[str, float]]] = {}
    for cat in categories:
        attrs = [(f"{name}:{table[cat]}", GROUP_WEIGHT) for name, table in tables.items()]
        attrs += [(f"tex:{t}", TEXTURE_WEIGHT) for t in TEXTURES[cat]]
        attrs.append((f"id:{cat}", IDIO_WEIGHT))
        attributes[cat] = attrs

    all_attrs = sorted({a for attrs in attributes.values() for a, _ in attrs})
    rng = np.random.Generator(np.random.PCG64(SEED))
    directions = {}
    for attr in all_attrs:
        d = rng.standard_normal(DIM)
        directions[attr] = d / np.linalg.norm(d)

    vectors = {}
    for cat in categories:
        v = np.zeros(DIM)
        for attr, weight in attributes[cat]:
            v += weight * directions[attr]
        vectors[cat] = v / np.linalg.norm(v)
    return vectors


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()

    vectors = build_vectors()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(f"{len(vectors)} {DIM}\n")
        for cat in sorted(vectors):
            values = " ".join(repr(float(x)) for x in vectors[cat])
            f.write(f"{cat} {values}\n")
    print(f"wrote {len(vectors)} vectors of dim {DIM} to {args.out}")


if __name__ == "__main__":
    main()
