"""Category embedding store, positional encodings, and scene tokenization.

Every object instance becomes one token vector: the category embedding,
a sinusoidal encoding of its receptacle slot (surface is slot 0, container
k is slot k + 1), and a sinusoidal encoding of its instance index.  Null
markers use the all-zero category vector.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from importlib import resources
from typing import IO

import numpy as np

from .scene import NULL_CATEGORY, ObjectInstance, SceneState

logger = logging.getLogger(__name__)

DEFAULT_POSITION_DIM = 16
DEFAULT_MAX_POSITIONS = 64


class EmbeddingError(Exception):
    pass


class MalformedHeader(EmbeddingError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


class DuplicateToken(EmbeddingError):
    pass


class PositionOutOfRange(EmbeddingError):
    pass


class UnknownCategory(EmbeddingError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> dense vector store; always contains the zero 'null' vector."""

    dim: int
    vectors: dict[str, np.ndarray]

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def lookup(
        self, token: str, strict: bool = False, _warned: set | None = None
    ) -> np.ndarray:
        """Vector for ``token``; unknown tokens fall back to zeros unless strict."""
        vec = self.vectors.get(token)
        if vec is not None:
            return vec
        if strict:
            raise UnknownCategory(f"no embedding for category {token!r}")
        if _warned is None or token not in _warned:
            logger.warning("no embedding for category %r; using zero vector", token)
            if _warned is not None:
                _warned.add(token)
        return np.zeros(self.dim)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(sorted(self.vectors))


def load_embedding_table(source: IO[str] | IO[bytes]) -> EmbeddingTable:
    """Parse a word2vec-style text stream: 'count dim' header, then rows."""
    raw = source.read()
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    lines = text.splitlines()
    if not lines:
        raise MalformedHeader("empty embedding stream")
    header = lines[0].split()
    if len(header) != 2 or not all(p.isdigit() for p in header):
        raise MalformedHeader(f"expected 'count dim' header, got {lines[0]!r}")
    count, dim = int(header[0]), int(header[1])
    if count < 1 or dim < 1:
        raise MalformedHeader(f"count and dim must be positive, got {lines[0]!r}")

    vectors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        token = parts[0]
        if len(parts) - 1 != dim:
            raise DimensionMismatch(
                f"line {lineno}: token {token!r} has {len(parts) - 1} values, expected {dim}"
            )
        if token in vectors:
            raise DuplicateToken(f"line {lineno}: duplicate token {token!r}")
        vectors[token] = np.array([float(x) for x in parts[1:]], dtype=np.float64)

    if len(vectors) != count:
        raise MalformedHeader(
            f"header promised {count} tokens but stream contains {len(vectors)}"
        )
    if NULL_CATEGORY in vectors:
        raise DuplicateToken(f"{NULL_CATEGORY!r} is reserved and may not appear in the stream")
    vectors[NULL_CATEGORY] = np.zeros(dim)
    return EmbeddingTable(dim=dim, vectors=vectors)


def save_embedding_table(table: EmbeddingTable, sink: IO[str]) -> None:
    """Inverse of load: writes every non-null token with round-trip floats."""
    tokens = [t for t in sorted(table.vectors) if t != NULL_CATEGORY]
    sink.write(f"{len(tokens)} {table.dim}\n")
    for token in tokens:
        values = " ".join(repr(float(x)) for x in table.vectors[token])
        sink.write(f"{token} {values}\n")


def builtin_embedding_table() -> EmbeddingTable:
    """The 38-category, 50-d table shipped with the package."""
    ref = resources.files("consor.data.embeddings") / "categories_50d.txt"
    return load_embedding_table(io.StringIO(ref.read_text(encoding="utf-8")))


def positional_encoding(position: int, dim: int, max_positions: int = DEFAULT_MAX_POSITIONS) -> np.ndarray:
    """Fixed sinusoidal encoding; component 2k is sin, 2k+1 is cos."""
    if not 0 <= position < max_positions:
        raise PositionOutOfRange(f"position {position} outside 0..{max_positions - 1}")
    enc = np.empty(dim, dtype=np.float64)
    half = np.arange((dim + 1) // 2, dtype=np.float64)
    angles = position / np.power(10000.0, 2.0 * half / dim)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles[: dim // 2])
    return enc


@dataclass(frozen=True)
class PositionalEncoder:
    dim: int = DEFAULT_POSITION_DIM
    max_positions: int = DEFAULT_MAX_POSITIONS

    def encode(self, position: int) -> np.ndarray:
        return positional_encoding(position, self.dim, self.max_positions)


@dataclass(frozen=True)
class SceneTokens:
    """Per-instance token matrix in the scene's canonical instance order."""

    vectors: np.ndarray  # (n_tokens, dim_category + dim_receptacle + dim_index)
    instances: tuple[ObjectInstance, ...]
    dims: tuple[int, int, int]

    @property
    def n_tokens(self) -> int:
        return len(self.instances)

    @property
    def token_dim(self) -> int:
        return int(self.vectors.shape[1])

    def category_slice(self) -> np.ndarray:
        return self.vectors[:, : self.dims[0]]

    def receptacle_slice(self) -> np.ndarray:
        return self.vectors[:, self.dims[0] : self.dims[0] + self.dims[1]]

    def index_slice(self) -> np.ndarray:
        return self.vectors[:, self.dims[0] + self.dims[1] :]


def encode_scene(
    state: SceneState,
    table: EmbeddingTable,
    receptacle_encoder: PositionalEncoder | None = None,
    index_encoder: PositionalEncoder | None = None,
    strict: bool = False,
) -> SceneTokens:
    """Assemble one token per instance: [category | receptacle | index]."""
    receptacle_encoder = receptacle_encoder or PositionalEncoder()
    index_encoder = index_encoder or PositionalEncoder()
    warned: set = set()
    rows = []
    for o in state.objects:
        category_vec = table.lookup(o.category, strict=strict, _warned=warned)
        rows.append(
            np.concatenate(
                [
                    category_vec,
                    receptacle_encoder.encode(o.receptacle.position),
                    index_encoder.encode(o.instance_index),
                ]
            )
        )
    vectors = np.stack(rows) if rows else np.zeros((0, table.dim + receptacle_encoder.dim + index_encoder.dim))
    return SceneTokens(
        vectors=vectors,
        instances=state.objects,
        dims=(table.dim, receptacle_encoder.dim, index_encoder.dim),
    )
