"""
Ephemeral in-memory vector index.

Holds the embedded chunks of one image for the duration of a question
session; nothing is written to disk. Use it as a context manager so the
entries are dropped when the session ends.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .chunking import Chunk
from .embeddings import NORM_TOLERANCE
from .utils import ValidationError, logger

DEFAULT_K = 4


@dataclass(frozen=True)
class EmbeddedChunk:
    chunk: Chunk
    vector: np.ndarray
    insertion_ordinal: int


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """
    Cosine similarity in [-1, 1].

    Raises:
        ValidationError: on a dimension mismatch or a zero-norm operand
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError([f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"])
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        raise ValidationError(["cosine of a zero vector"])
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def _provider_key(provider) -> str:
    """Provider identity: its fingerprint (name, dimension, seed or model) when it has one."""
    return getattr(provider, "fingerprint", None) or provider.name


class EphemeralIndex:
    """
    Per-image vector index with brute-force cosine search.

    Args:
        image_id: Image whose chunks this index accepts
        provider: Embedding provider; its name and dimension become the index fingerprint,
            and later inserts must come from a provider with the same fingerprint
    """

    def __init__(self, image_id: str, provider):
        self.image_id = image_id
        self.provider = provider
        self.entries: List[EmbeddedChunk] = []
        self.dimension: Optional[int] = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def fingerprint(self) -> str:
        return f"{self.provider.name}:{self.dimension}"

    def close(self) -> None:
        """Destroy the index contents."""
        logger.debug(f"Discarding ephemeral index for image {self.image_id} ({len(self.entries)} entries)")
        self.entries = []

    def insert(self, chunk: Chunk, provider=None) -> EmbeddedChunk:
        """Embed and insert a single chunk."""
        return self.insert_many([chunk], provider)[0]

    def insert_many(self, chunks: List[Chunk], provider=None) -> List[EmbeddedChunk]:
        """
        Embed and append chunks with consecutive ordinals.

        All chunks are embedded before anything is appended, so a provider
        failure leaves the index unchanged.

        Raises:
            ValidationError: cross-image chunk, foreign provider or dimension mismatch
            ProviderError: propagated from the provider
        """
        provider = provider or self.provider
        if provider is not self.provider and _provider_key(provider) != _provider_key(self.provider):
            raise ValidationError([f"index built with provider '{_provider_key(self.provider)}', got '{_provider_key(provider)}'"])
        for chunk in chunks:
            if chunk.source_image != self.image_id:
                raise ValidationError([f"chunk from image '{chunk.source_image}' rejected by index of image '{self.image_id}'"])
        if not chunks:
            return []

        vectors = provider.embed_batch([chunk.text for chunk in chunks])
        dimension = self.dimension
        for vector in vectors:
            if abs(np.linalg.norm(vector) - 1.0) > NORM_TOLERANCE:
                raise ValidationError(["provider returned a non-unit vector"])
            if dimension is None:
                dimension = vector.shape[0]
            elif vector.shape[0] != dimension:
                raise ValidationError([f"dimension mismatch: index holds {dimension}, got {vector.shape[0]}"])

        self.dimension = dimension
        start = len(self.entries)
        added = [
            EmbeddedChunk(chunk=chunk, vector=vector, insertion_ordinal=start + offset)
            for offset, (chunk, vector) in enumerate(zip(chunks, vectors))
        ]
        self.entries.extend(added)
        return added

    def top_k(self, query: np.ndarray, k: int = DEFAULT_K) -> List[Tuple[Chunk, float]]:
        """
        The k most similar chunks by cosine similarity.

        Sorted by score descending, ties broken by lower insertion ordinal.
        Returns all entries when fewer than k exist; an empty index yields [].

        Raises:
            ValidationError: on a query dimension mismatch or k < 1
        """
        if k < 1:
            raise ValidationError([f"k must be >= 1, got {k}"])
        if not self.entries:
            return []
        query = np.asarray(query, dtype=np.float64)
        if query.shape[0] != self.dimension:
            raise ValidationError([f"query dimension {query.shape[0]} does not match index dimension {self.dimension}"])

        scored = [(cosine(query, entry.vector), entry.insertion_ordinal, entry.chunk) for entry in self.entries]
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [(chunk, score) for score, _, chunk in scored[:k]]
