"""Collaborative-filtering-style baseline: co-occurrence similarities plus
spectral clustering, with the schema given a priori.

For each schema the baseline fits a symmetric category-similarity matrix
from that schema's training goal scenes: similarity is the fraction of
co-appearing scenes in which two categories share a container.  At
prediction time the scene's categories are spectrally clustered into one
cluster per container, clusters are matched to containers by agreement with
the prearranged objects, and every Surface object follows its category's
cluster.  Duplicates of a category therefore always co-locate, which is
exactly why this family of methods cannot express the one-instance-per-
container arrangement style.

This is an approximation of the ranking-factorization original: it keeps
the two properties the comparison rests on — a pairwise-similarity
representation and advance knowledge of the schema — while fitting from
the same scenes the encoder sees.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from .dataset import ScenePair
from .groupings import SchemaId
from .scene import ReceptacleId, SceneState, move_object


class CFError(Exception):
    pass


class EmptySchemaSlice(CFError):
    pass


class DegenerateGraph(CFError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    schema: SchemaId
    categories: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        k = len(self.categories)
        if self.values.shape != (k, k):
            raise CFError(f"similarity shape {self.values.shape} for {k} categories")
        if not np.allclose(self.values, self.values.T):
            raise CFError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(self.values), 1.0):
            raise CFError("similarity diagonal must be 1")
        if not np.all(np.isfinite(self.values)):
            raise CFError("similarity entries must be finite")

    def index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise CFError(f"category {category!r} not covered by similarity matrix") from None

    def restrict(self, categories: Sequence[str]) -> np.ndarray:
        idx = [self.index(c) for c in categories]
        return self.values[np.ix_(idx, idx)].copy()


def fit_pairwise_similarity(
    pairs: Sequence[ScenePair],
    schema: SchemaId,
) -> SimilarityMatrix:
    """values[i][j] = (# goal scenes of the schema where i and j share a
    container) / (# goal scenes where both appear); 0 for pairs never
    co-appearing; unit diagonal."""
    goals = [p.goal for p in pairs if p.schema == schema]
    if not goals:
        raise EmptySchemaSlice(f"no training scenes for schema {schema.label}")

    vocabulary = sorted({o.category for g in goals for o in g.non_null()})
    index = {c: i for i, c in enumerate(vocabulary)}
    k = len(vocabulary)
    appear = np.zeros((k, k))
    share = np.zeros((k, k))
    for goal in goals:
        present = sorted({o.category for o in goal.non_null()})
        by_container: dict[int, set[str]] = {}
        for o in goal.non_null():
            by_container.setdefault(o.receptacle.index, set()).add(o.category)
        shared_pairs = set()
        for members in by_container.values():
            members = sorted(members)
            for a_i, a in enumerate(members):
                for b in members[a_i + 1:]:
                    shared_pairs.add((a, b))
        for a_i, a in enumerate(present):
            for b in present[a_i + 1:]:
                i, j = index[a], index[b]
                appear[i, j] += 1
                appear[j, i] += 1
                if (a, b) in shared_pairs:
                    share[i, j] += 1
                    share[j, i] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(appear > 0, share / np.maximum(appear, 1), 0.0)
    np.fill_diagonal(values, 1.0)
    return SimilarityMatrix(schema=schema, categories=tuple(vocabulary), values=values)


# ---------------------------------------------------------------------------
# Spectral clustering
# ---------------------------------------------------------------------------

def _farthest_point_kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd iterations from deterministic farthest-point initialization."""
    n = points.shape[0]
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    while len(centers) < min(k, n):
        dist = np.min(
            [np.linalg.norm(points - points[c], axis=1) for c in centers], axis=0
        )
        centers.append(int(np.argmax(dist)))
    centroids = points[centers].astype(np.float64)
    if len(centers) < k:
        centroids = np.vstack([centroids, np.zeros((k - len(centers), points.shape[1]))])

    labels = np.full(n, -1, dtype=np.intp)
    for _iteration in range(100):
        dists = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        new_labels = np.argmin(dists, axis=1)
        for c in range(k):
            if not np.any(new_labels == c) and n > k:
                # Revive an empty cluster with the point farthest from its center.
                spread = dists[np.arange(n), new_labels]
                new_labels[int(np.argmax(spread))] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if members.size:
                centroids[c] = members.mean(axis=0)
    return labels


def spectral_cluster(
    categories: Sequence[str],
    matrix: np.ndarray,
    k: int,
    *,
    seed: int = 0,
    on_degenerate: str = "fallback",
) -> dict[str, int]:
    """Normalized-Laplacian spectral clustering of the restricted similarity.

    Embeds each category on the k smallest-eigenvalue eigenvectors of
    L = I − D^(−1/2) S D^(−1/2) and partitions by centroid refinement with
    deterministic farthest-point initialization.  An all-zero off-diagonal
    similarity carries no grouping signal: with ``on_degenerate="fallback"``
    categories are dealt round-robin into singleton-style clusters, with
    ``"raise"`` a DegenerateGraph error surfaces instead.
    """
    n = len(categories)
    if n == 0:
        raise CFError("cannot cluster zero categories")
    if k < 1:
        raise CFError(f"cluster count must be >= 1, got {k}")
    if matrix.shape != (n, n):
        raise CFError(f"restricted matrix shape {matrix.shape} for {n} categories")
    if k == 1:
        return {c: 0 for c in categories}
    if n <= k:
        return {c: i for i, c in enumerate(categories)}

    off_diagonal = matrix - np.diag(np.diag(matrix))
    if not np.any(off_diagonal > 0):
        if on_degenerate == "raise":
            raise DegenerateGraph("similarity restricted to the scene is all zero")
        return {c: i % k for i, c in enumerate(categories)}

    s = matrix.copy()
    np.fill_diagonal(s, 1.0)
    d_inv_sqrt = 1.0 / np.sqrt(s.sum(axis=1))
    laplacian = np.eye(n) - (d_inv_sqrt[:, None] * s * d_inv_sqrt[None, :])
    laplacian = (laplacian + laplacian.T) / 2.0
    _, eigvecs = np.linalg.eigh(laplacian)
    embedding = eigvecs[:, :k]
    labels = _farthest_point_kmeans(embedding, k, seed)
    return {c: int(labels[i]) for i, c in enumerate(categories)}


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _cluster_to_container(
    state: SceneState,
    labels: dict[str, int],
    k: int,
) -> dict[int, int]:
    """Match clusters to containers by maximum agreement with prearranged
    objects: brute-force over bijections, first-in-order tie break (so the
    no-evidence case maps cluster i to container i)."""
    agreement = np.zeros((k, k))
    for o in state.non_null():
        if not o.receptacle.is_surface:
            agreement[labels[o.category], o.receptacle.index] += 1
    best_perm = None
    best_score = -1.0
    for perm in permutations(range(k)):
        score = sum(agreement[cluster, perm[cluster]] for cluster in range(k))
        if score > best_score:
            best_score = score
            best_perm = perm
    return {cluster: best_perm[cluster] for cluster in range(k)}


def predict_cf(initial: SceneState, sim: SimilarityMatrix) -> SceneState:
    """Cluster the scene's categories into one cluster per container and
    send every Surface object (duplicates included) to its category's
    container."""
    categories = sorted({o.category for o in initial.non_null()})
    restricted = sim.restrict(categories)
    k = initial.n_containers
    labels = spectral_cluster(categories, restricted, k)
    # Clamp labels into container range (n <= k path can emit fewer labels).
    labels = {c: min(lab, k - 1) for c, lab in labels.items()}
    mapping = _cluster_to_container(initial, labels, k)
    state = initial
    for o in initial.surface_objects():
        if o.is_null:
            continue
        dest = ReceptacleId.container(mapping[labels[o.category]])
        state = move_object(state, o.category, o.instance_index, dest)
    return state


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def similarity_to_text(sim: SimilarityMatrix) -> str:
    lines = [f"schema\t{sim.schema.label}"]
    lines.append("\t".join(("category",) + sim.categories))
    for i, category in enumerate(sim.categories):
        row = "\t".join(repr(float(v)) for v in sim.values[i])
        lines.append(f"{category}\t{row}")
    return "\n".join(lines) + "\n"


def similarity_from_text(text: str) -> SimilarityMatrix:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("schema\t"):
        raise CFError("malformed similarity table: missing schema line")
    schema = SchemaId.parse(lines[0].split("\t", 1)[1])
    header = lines[1].split("\t")
    if header[0] != "category":
        raise CFError("malformed similarity table: missing category header")
    categories = tuple(header[1:])
    rows = []
    for line in lines[2:]:
        parts = line.split("\t")
        rows.append([float(v) for v in parts[1:]])
    values = np.array(rows, dtype=np.float64)
    return SimilarityMatrix(schema=schema, categories=categories, values=values)
