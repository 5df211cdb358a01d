"""ConSOR encoder: full self-attention over scene tokens, normalized latents,
triplet-margin training, and centroid-cosine placement of unarranged objects.

Scenes are encoded token-by-token (one token per object instance, nulls
included), passed through stacked post-norm Transformer encoder layers, and
reduced to unit-norm latent vectors by an MLP head.  Training pulls latents of
objects sharing a goal container together; prediction assigns each Surface
object to the container whose latent centroid scores highest under a dot
product (equivalently cosine, since everything is unit-norm).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .dataset import ScenePair
from .embeddings import EmbeddingTable, PositionalEncoder, SceneTokens, encode_scene
from .scene import (
    ObjectInstance,
    ReceptacleId,
    SceneState,
    move_object,
    scene_edit_distance,
)


class ModelError(Exception):
    pass


class EmptyDataset(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


class NoContainers(ModelError):
    pass


class NoValidTriplet(ModelError):
    """Degenerate scene with a single goal container; mining yields no triples."""


class CheckpointMismatch(ModelError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 82
    model_dim: int = 128
    n_heads: int = 4
    feedforward_dim: int = 256
    n_layers: int = 3
    latent_dim: int = 32
    head_hidden_dim: int = 64
    dropout_rate: float = 0.5
    margin: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    triplet_budget: int = 256
    rng_seed: int = 17
    # Optional training-time augmentation: relabel container indices with a
    # fresh permutation per scene per epoch (receptacle-encoding slices are
    # rewritten).  Off by default.
    augment_container_permutation: bool = False

    # The snapshot kept at the end of training is always the one with the
    # best validation success rate; this is not configurable.
    EARLY_STOPPING_METRIC = "validation_success_rate"

    def validate(self) -> None:
        if self.model_dim % self.n_heads != 0:
            raise ModelError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.margin <= 0:
            raise ModelError(f"margin must be positive, got {self.margin}")
        for name in ("token_dim", "model_dim", "feedforward_dim", "n_layers",
                     "latent_dim", "head_hidden_dim", "batch_size", "triplet_budget"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.max_epochs < 0:
            raise ModelError("max_epochs must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "token_dim": self.token_dim,
            "model_dim": self.model_dim,
            "n_heads": self.n_heads,
            "feedforward_dim": self.feedforward_dim,
            "n_layers": self.n_layers,
            "latent_dim": self.latent_dim,
            "head_hidden_dim": self.head_hidden_dim,
            "dropout_rate": self.dropout_rate,
            "margin": self.margin,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "triplet_budget": self.triplet_budget,
            "rng_seed": self.rng_seed,
            "augment_container_permutation": self.augment_container_permutation,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class LatentScene:
    """Unit-norm latent per token, aligned with SceneTokens ordering."""

    latents: np.ndarray
    instances: tuple[ObjectInstance, ...]

    @property
    def n_tokens(self) -> int:
        return len(self.instances)


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: EncoderConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Fresh parameter set: uniform(±1/√fan_in) weights, zero biases, unit gains."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    dm, ff = config.model_dim, config.feedforward_dim
    params: dict[str, Tensor] = {}

    def weight(name: str, fan_in: int, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(_uniform(rng, fan_in, shape), requires_grad=True)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    weight("input/W", config.token_dim, (config.token_dim, dm))
    zeros("input/b", (dm,))
    for i in range(config.n_layers):
        for proj in ("Wq", "Wk", "Wv", "Wo"):
            weight(f"layer{i}/attn/{proj}", dm, (dm, dm))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"layer{i}/attn/{bias}", (dm,))
        ones(f"layer{i}/norm1/gain", (dm,))
        zeros(f"layer{i}/norm1/bias", (dm,))
        weight(f"layer{i}/ff/W1", dm, (dm, ff))
        zeros(f"layer{i}/ff/b1", (ff,))
        weight(f"layer{i}/ff/W2", ff, (ff, dm))
        zeros(f"layer{i}/ff/b2", (dm,))
        ones(f"layer{i}/norm2/gain", (dm,))
        zeros(f"layer{i}/norm2/bias", (dm,))
    weight("head/W1", dm, (dm, config.head_hidden_dim))
    zeros("head/b1", (config.head_hidden_dim,))
    weight("head/W2", config.head_hidden_dim, (config.head_hidden_dim, config.latent_dim))
    zeros("head/b2", (config.latent_dim,))
    return params


def encode_array(
    params: dict[str, Tensor],
    config: EncoderConfig,
    vectors: np.ndarray,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Differentiable forward pass over a (batch, n_tokens, token_dim) array.

    Every scene in the batch must have the same token count, making attention
    a dense batched matmul with no masking.  Returns (batch, n_tokens,
    latent_dim) unit-norm latents.
    """
    if vectors.ndim != 3 or vectors.shape[2] != config.token_dim:
        raise ShapeMismatch(
            f"expected (batch, n_tokens, {config.token_dim}) tokens, got {vectors.shape}"
        )
    B, N, _ = vectors.shape
    dm, H = config.model_dim, config.n_heads
    dh = dm // H
    rate = config.dropout_rate

    x = Tensor(vectors)
    h = ad.add(ad.matmul(ad.reshape(x, (B * N, config.token_dim)), params["input/W"]),
               params["input/b"])
    for i in range(config.n_layers):
        p = f"layer{i}"

        def heads(flat: Tensor) -> Tensor:
            split = ad.reshape(flat, (B, N, H, dh))
            return ad.reshape(ad.transpose(split, (0, 2, 1, 3)), (B * H, N, dh))

        q = heads(ad.add(ad.matmul(h, params[f"{p}/attn/Wq"]), params[f"{p}/attn/bq"]))
        k = heads(ad.add(ad.matmul(h, params[f"{p}/attn/Wk"]), params[f"{p}/attn/bk"]))
        v = heads(ad.add(ad.matmul(h, params[f"{p}/attn/Wv"]), params[f"{p}/attn/bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(
            ad.transpose(ad.reshape(ctx, (B, H, N, dh)), (0, 2, 1, 3)), (B * N, dm)
        )
        attn_out = ad.add(ad.matmul(merged, params[f"{p}/attn/Wo"]), params[f"{p}/attn/bo"])
        attn_out = ad.dropout(attn_out, rate, rng, training)
        h = ad.add(
            ad.mul(ad.layer_norm(ad.add(h, attn_out), axis=-1), params[f"{p}/norm1/gain"]),
            params[f"{p}/norm1/bias"],
        )

        ff = ad.relu(ad.add(ad.matmul(h, params[f"{p}/ff/W1"]), params[f"{p}/ff/b1"]))
        ff = ad.dropout(ff, rate, rng, training)
        ff = ad.add(ad.matmul(ff, params[f"{p}/ff/W2"]), params[f"{p}/ff/b2"])
        ff = ad.dropout(ff, rate, rng, training)
        h = ad.add(
            ad.mul(ad.layer_norm(ad.add(h, ff), axis=-1), params[f"{p}/norm2/gain"]),
            params[f"{p}/norm2/bias"],
        )

    hidden = ad.relu(ad.add(ad.matmul(h, params["head/W1"]), params["head/b1"]))
    z = ad.add(ad.matmul(hidden, params["head/W2"]), params["head/b2"])
    z = ad.l2_normalize(z, axis=-1)
    return ad.reshape(z, (B, N, config.latent_dim))


def encode(
    tokens: SceneTokens,
    params: dict[str, Tensor],
    config: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> LatentScene:
    """Encode one scene; mode "eval" is deterministic (dropout disabled)."""
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tokens.token_dim != config.token_dim:
        raise ShapeMismatch(
            f"token dim {tokens.token_dim} != configured {config.token_dim}"
        )
    out = encode_array(params, config, tokens.vectors[np.newaxis],
                       training=(mode == "train"), rng=rng)
    return LatentScene(latents=out.data[0].copy(), instances=tokens.instances)


# ---------------------------------------------------------------------------
# Triplet mining and loss
# ---------------------------------------------------------------------------

def goal_container_labels(pair: ScenePair) -> np.ndarray:
    """Goal container index per initial-scene token (canonical order).

    Null tokens are assigned the container they mark; real objects take the
    container that holds them in the goal state.
    """
    labels = np.empty(pair.initial.size, dtype=np.intp)
    for i, inst in enumerate(pair.initial.objects):
        if inst.is_null:
            labels[i] = inst.receptacle.index
        else:
            goal_inst = pair.goal.find(inst.category, inst.instance_index)
            if goal_inst is None or goal_inst.receptacle.is_surface:
                raise ModelError(
                    f"{pair.scene_id}: {inst!r} has no goal container"
                )
            labels[i] = goal_inst.receptacle.index
    return labels


def _triplet_arrays(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (anchor, positive, negative) index triples, grouped by goal
    container in ascending label order, anchor-major within a group."""
    anchors, positives, negatives = [], [], []
    all_idx = np.arange(labels.size)
    for lab in np.unique(labels):
        members = all_idx[labels == lab]
        others = all_idx[labels != lab]
        if members.size < 2 or others.size == 0:
            continue
        a = np.repeat(members, members.size)
        p = np.tile(members, members.size)
        keep = a != p
        a, p = a[keep], p[keep]
        anchors.append(np.repeat(a, others.size))
        positives.append(np.repeat(p, others.size))
        negatives.append(np.tile(others, a.size))
    if not anchors:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty, empty
    return (np.concatenate(anchors), np.concatenate(positives), np.concatenate(negatives))


def _subsample_triplets(
    triples: tuple[np.ndarray, np.ndarray, np.ndarray],
    budget: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a, p, n = triples
    if a.size <= budget:
        return triples
    sel = rng.choice(a.size, size=budget, replace=False)
    sel.sort()
    return a[sel], p[sel], n[sel]


def mine_triplets(
    pair: ScenePair,
    latents: LatentScene | None = None,
    *,
    budget: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, int, int]]:
    """Within-scene triples over initial-state tokens; anchor and positive
    share a goal container, the negative does not.

    A scene whose tokens all share one goal container has no valid triple
    and yields an empty list (the NoValidTriplet condition); callers skip
    such scenes for the loss.  When the enumeration exceeds ``budget`` a
    uniform subsample is drawn from ``rng``.
    """
    if latents is not None and latents.n_tokens != pair.initial.size:
        raise ShapeMismatch(
            f"latents cover {latents.n_tokens} tokens, scene has {pair.initial.size}"
        )
    triples = _triplet_arrays(goal_container_labels(pair))
    if budget is not None:
        if rng is None:
            rng = np.random.default_rng(0)
        triples = _subsample_triplets(triples, budget, rng)
    return list(zip(triples[0].tolist(), triples[1].tolist(), triples[2].tolist()))


def triplet_margin_loss(
    latents: Tensor,
    triples: Sequence[tuple[int, int, int]],
    margin: float,
) -> Tensor:
    """Mean over triples of max(0, ‖a−p‖₂ − ‖a−n‖₂ + margin)."""
    if len(triples) == 0:
        return Tensor(0.0)
    idx = np.asarray(triples, dtype=np.intp)
    a = ad.gather_rows(latents, idx[:, 0])
    p = ad.gather_rows(latents, idx[:, 1])
    n = ad.gather_rows(latents, idx[:, 2])
    d_ap = ad.sqrt(ad.reduce_sum(ad.mul(ad.sub(a, p), ad.sub(a, p)), axis=-1))
    d_an = ad.sqrt(ad.reduce_sum(ad.mul(ad.sub(a, n), ad.sub(a, n)), axis=-1))
    hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), Tensor(margin)))
    return ad.reduce_mean(hinge)


# ---------------------------------------------------------------------------
# Prediction (centroid-cosine assignment)
# ---------------------------------------------------------------------------

def _container_centroids(latents: np.ndarray, instances: Sequence[ObjectInstance],
                         n_containers: int) -> np.ndarray:
    """Normalized mean latent per container, nulls included; (K, latent) array."""
    centroids = np.zeros((n_containers, latents.shape[1]))
    for k in range(n_containers):
        rows = [latents[i] for i, inst in enumerate(instances)
                if not inst.receptacle.is_surface and inst.receptacle.index == k]
        if rows:
            mean = np.mean(rows, axis=0)
            norm = np.linalg.norm(mean)
            centroids[k] = mean / norm if norm > 1e-12 else mean
    return centroids


def _assign_from_latents(
    latents: np.ndarray,
    instances: Sequence[ObjectInstance],
    n_containers: int,
) -> dict[tuple[str, int], int]:
    """One-shot argmax-dot assignment of every Surface object; ties go to
    the lowest container index (np.argmax takes the first maximum)."""
    centroids = _container_centroids(latents, instances, n_containers)
    assignments: dict[tuple[str, int], int] = {}
    for i, inst in enumerate(instances):
        if inst.receptacle.is_surface and not inst.is_null:
            scores = centroids @ latents[i]
            assignments[inst.key] = int(np.argmax(scores))
    return assignments


def predict_placements(
    initial: SceneState,
    params: dict[str, Tensor],
    config: EncoderConfig,
    table: EmbeddingTable,
    *,
    strict: bool = False,
    sequential: bool = False,
) -> tuple[dict[tuple[str, int], ReceptacleId], SceneState]:
    """Assign every Surface object to a container and return the map plus
    the resulting state.

    Default is the one-shot mode: a single eval-mode encoding of the initial
    scene, container centroids over current occupants (nulls included), and
    an independent argmax per object.  ``sequential=True`` is an ablation
    that re-encodes after each single placement.
    """
    if initial.n_containers < 1:
        raise NoContainers("prediction needs at least one container")

    assignments: dict[tuple[str, int], ReceptacleId] = {}
    state = initial
    if not sequential:
        scene = encode(encode_scene(initial, table, strict=strict), params, config)
        plan = _assign_from_latents(scene.latents, scene.instances, initial.n_containers)
        for (category, index), k in plan.items():
            dest = ReceptacleId.container(k)
            assignments[(category, index)] = dest
            state = move_object(state, category, index, dest)
    else:
        while True:
            pending = [o for o in state.surface_objects() if not o.is_null]
            if not pending:
                break
            scene = encode(encode_scene(state, table, strict=strict), params, config)
            plan = _assign_from_latents(scene.latents, scene.instances, state.n_containers)
            target = pending[0]
            dest = ReceptacleId.container(plan[target.key])
            assignments[target.key] = dest
            state = move_object(state, target.category, target.instance_index, dest)
    return assignments, state


# ---------------------------------------------------------------------------
# Latent export (2-D principal-component projection)
# ---------------------------------------------------------------------------

def pca_2d(latents: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates of the rows, deterministic sign
    (largest-magnitude loading positive per component)."""
    if latents.shape[0] == 0:
        return np.zeros((0, 2))
    centered = latents - latents.mean(axis=0, keepdims=True)
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order]
    if components.shape[1] < 2:
        components = np.pad(components, ((0, 0), (0, 2 - components.shape[1])))
    for j in range(2):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def export_latents(
    initial: SceneState,
    params: dict[str, Tensor],
    config: EncoderConfig,
    table: EmbeddingTable,
    *,
    strict: bool = False,
) -> list[dict]:
    """Per-token rows: token descriptor, latent vector, 2-D projection."""
    scene = encode(encode_scene(initial, table, strict=strict), params, config)
    projection = pca_2d(scene.latents)
    return [
        {
            "token": repr(inst),
            "latent": scene.latents[i].tolist(),
            "projection": projection[i].tolist(),
        }
        for i, inst in enumerate(scene.instances)
    ]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    config: EncoderConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_success: float | None = None


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}


def _batched_eval_latents(
    params: dict[str, Tensor],
    config: EncoderConfig,
    token_arrays: Sequence[np.ndarray],
) -> list[np.ndarray]:
    """Eval-mode latents for many scenes, batching equal-length scenes."""
    by_length: dict[int, list[int]] = {}
    for i, arr in enumerate(token_arrays):
        by_length.setdefault(arr.shape[0], []).append(i)
    out: list[np.ndarray | None] = [None] * len(token_arrays)
    for _, members in sorted(by_length.items()):
        for start in range(0, len(members), config.batch_size):
            chunk = members[start:start + config.batch_size]
            stacked = np.stack([token_arrays[i] for i in chunk])
            z = encode_array(params, config, stacked, training=False)
            for row, i in enumerate(chunk):
                out[i] = z.data[row]
    return out  # type: ignore[return-value]


def validation_success_rate(
    params: dict[str, Tensor],
    config: EncoderConfig,
    pairs: Sequence[ScenePair],
    token_arrays: Sequence[np.ndarray],
    instances: Sequence[tuple[ObjectInstance, ...]],
) -> float:
    """Fraction of scenes placed with edit distance 0 (the success-rate
    metric, computed directly; never touches schema labels)."""
    latents = _batched_eval_latents(params, config, token_arrays)
    correct = 0
    for i, pair in enumerate(pairs):
        plan = _assign_from_latents(latents[i], instances[i], pair.initial.n_containers)
        state = pair.initial
        for (category, index), k in plan.items():
            state = move_object(state, category, index, ReceptacleId.container(k))
        if scene_edit_distance(state, pair.goal) == 0:
            correct += 1
    return correct / len(pairs)


def train(
    train_pairs: Sequence[ScenePair],
    val_pairs: Sequence[ScenePair],
    table: EmbeddingTable,
    config: EncoderConfig,
    *,
    log_fn: Callable[[str], None] | None = None,
) -> TrainResult:
    """Shuffled mini-batch training with per-epoch validation; returns the
    snapshot with the highest validation success rate (ties → earlier epoch).

    All randomness (init, shuffling, dropout, triplet subsampling) flows
    from config.rng_seed.  The loop never reads schema labels.
    """
    config.validate()
    if not train_pairs or not val_pairs:
        raise EmptyDataset("training requires non-empty train and val splits")

    seed_seq = np.random.SeedSequence(config.rng_seed)
    children = seed_seq.spawn(config.max_epochs + 1)
    params = init_params(config, np.random.default_rng(children[0]))

    # Token arrays are fixed across epochs; encode every scene once.
    first_tokens = encode_scene(train_pairs[0].initial, table)
    train_tokens = [encode_scene(p.initial, table).vectors for p in train_pairs]
    train_instances = [p.initial.objects for p in train_pairs]
    val_tokens = [encode_scene(p.initial, table).vectors for p in val_pairs]
    val_instances = [p.initial.objects for p in val_pairs]
    if train_tokens[0].shape[1] != config.token_dim:
        raise ShapeMismatch(
            f"dataset tokens have dim {train_tokens[0].shape[1]}, "
            f"config expects {config.token_dim}"
        )
    # Full triple enumerations are static; only the per-epoch subsample varies.
    triple_cache = [_triplet_arrays(goal_container_labels(p)) for p in train_pairs]

    # Support for the container-relabeling augmentation: where each token's
    # receptacle-encoding slice sits and which container it names.
    dim_cat, dim_rec, _ = first_tokens.dims
    rec_slice = slice(dim_cat, dim_cat + dim_rec)
    rec_encoder = PositionalEncoder(dim=dim_rec)
    container_of = [
        np.array([-1 if o.receptacle.is_surface else o.receptacle.index
                  for o in p.initial.objects], dtype=np.intp)
        for p in train_pairs
    ]

    def permute_receptacles(vectors: np.ndarray, scene: int,
                            rng: np.random.Generator) -> np.ndarray:
        perm = rng.permutation(train_pairs[scene].initial.n_containers)
        vectors = vectors.copy()
        for t, k in enumerate(container_of[scene]):
            if k >= 0:
                vectors[t, rec_slice] = rec_encoder.encode(int(perm[k]) + 1)
        return vectors

    result = TrainResult(params=_snapshot(params), config=config)
    if config.max_epochs == 0:
        return result

    opt = ad.AdamState(learning_rate=config.learning_rate)
    best_sr = -1.0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(children[epoch])
        order = rng.permutation(len(train_pairs))
        by_length: dict[int, list[int]] = {}
        for i in order:
            by_length.setdefault(train_tokens[i].shape[0], []).append(int(i))
        batches: list[list[int]] = []
        for _, members in sorted(by_length.items()):
            for start in range(0, len(members), config.batch_size):
                batches.append(members[start:start + config.batch_size])
        rng.shuffle(batches)

        epoch_losses = []
        for batch in batches:
            if config.augment_container_permutation:
                stacked = np.stack([
                    permute_receptacles(train_tokens[i], i, rng) for i in batch
                ])
            else:
                stacked = np.stack([train_tokens[i] for i in batch])
            B, N, _ = stacked.shape
            anchors, positives, negatives, weights = [], [], [], []
            contributing = 0
            per_scene: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
            for row, i in enumerate(batch):
                a, p, n = _subsample_triplets(triple_cache[i], config.triplet_budget, rng)
                per_scene.append((a + row * N, p + row * N, n + row * N))
                if a.size:
                    contributing += 1
            if contributing == 0:
                continue
            for a, p, n in per_scene:
                if a.size == 0:
                    continue
                anchors.append(a)
                positives.append(p)
                negatives.append(n)
                weights.append(np.full(a.size, 1.0 / (a.size * contributing)))
            idx_a = np.concatenate(anchors)
            idx_p = np.concatenate(positives)
            idx_n = np.concatenate(negatives)
            w = Tensor(np.concatenate(weights))

            with ad.Tape() as tape:
                z = encode_array(params, config, stacked, training=True, rng=rng)
                flat = ad.reshape(z, (B * N, config.latent_dim))
                a_lat = ad.gather_rows(flat, idx_a)
                p_lat = ad.gather_rows(flat, idx_p)
                n_lat = ad.gather_rows(flat, idx_n)
                d_ap = ad.sqrt(ad.reduce_sum(
                    ad.mul(ad.sub(a_lat, p_lat), ad.sub(a_lat, p_lat)), axis=-1))
                d_an = ad.sqrt(ad.reduce_sum(
                    ad.mul(ad.sub(a_lat, n_lat), ad.sub(a_lat, n_lat)), axis=-1))
                hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), Tensor(config.margin)))
                loss = ad.reduce_sum(ad.mul(hinge, w))
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise NonFiniteLoss(
                        f"non-finite loss {loss_value} at epoch {epoch}"
                    )
                ad.backward(loss, tape)
            ad.adam_step(params, opt)
            epoch_losses.append(loss_value)

        val_sr = validation_success_rate(params, config, val_pairs, val_tokens, val_instances)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        result.history.append({
            "epoch": epoch,
            "train_loss": mean_loss,
            "val_success_rate": val_sr,
        })
        if log_fn is not None:
            log_fn(f"epoch {epoch:3d}  loss {mean_loss:.6f}  val_sr {val_sr:.4f}")
        if val_sr > best_sr:
            best_sr = val_sr
            result.params = _snapshot(params)
            result.best_epoch = epoch
            result.best_val_success = val_sr
    return result


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_ARCHIVE = "params.bin"
CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(
    directory: Path,
    params: dict[str, Tensor],
    config: EncoderConfig,
    dataset_digest: str | None = None,
    history: list[dict] | None = None,
) -> dict:
    """Write the parameter archive plus a manifest embedding the config and
    the dataset manifest digest; both files are byte-deterministic."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    archive_path = directory / CHECKPOINT_ARCHIVE
    ad.save_tensor_archive({name: p.data for name, p in params.items()}, archive_path)
    manifest = {
        "config": config.to_json_dict(),
        "dataset_digest": dataset_digest,
        "param_names": list(params),
        "params_digest": hashlib.sha256(archive_path.read_bytes()).hexdigest(),
    }
    (directory / CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    if history is not None:
        (directory / "training_log.json").write_text(
            json.dumps(history, indent=2) + "\n"
        )
    return manifest


def load_checkpoint(
    directory: Path,
    expected_dataset_digest: str | None = None,
) -> tuple[dict[str, Tensor], EncoderConfig, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text())
    archive_path = directory / CHECKPOINT_ARCHIVE
    actual = hashlib.sha256(archive_path.read_bytes()).hexdigest()
    if actual != manifest["params_digest"]:
        raise CheckpointMismatch(
            f"{archive_path}: digest {actual} != manifest {manifest['params_digest']}"
        )
    if (expected_dataset_digest is not None
            and manifest.get("dataset_digest") is not None
            and manifest["dataset_digest"] != expected_dataset_digest):
        raise CheckpointMismatch(
            "checkpoint was trained against a different dataset "
            f"({manifest['dataset_digest']} != {expected_dataset_digest})"
        )
    config = EncoderConfig.from_json_dict(manifest["config"])
    arrays = ad.load_tensor_archive(archive_path)
    if list(arrays) != manifest["param_names"]:
        raise CheckpointMismatch(f"{archive_path}: parameter names disagree with manifest")
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return params, config, manifest
