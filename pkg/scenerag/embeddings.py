import hashlib
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import requests

from .cassette import Cassette
from .utils import ProviderError, ValidationError, logger, prompt_digest

NORM_TOLERANCE = 1e-6

# letters and digits of any script; underscore counts as punctuation
_TOKEN = re.compile(r"[^\W_]+")


def normalize(values: Sequence[float]) -> np.ndarray:
    """
    L2-normalize a vector.

    Raises:
        ValidationError: for exact-zero or non-finite input
    """
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise ValidationError([f"embedding must be a non-empty 1-d vector, got shape {vector.shape}"])
    if not np.all(np.isfinite(vector)):
        raise ValidationError(["embedding has non-finite entries"])
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise ValidationError(["embedding is the zero vector"])
    return vector / norm


def tokenize(text: str) -> List[str]:
    """
    Case-fold and split on whitespace/punctuation; letters of any script are kept.

    Plural ``s`` is folded on tokens longer than three characters (``cars`` ->
    ``car``) so questions and chunks share vocabulary.
    """
    tokens = []
    for token in _TOKEN.findall(text.casefold()):
        if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
            token = token[:-1]
        tokens.append(token)
    return tokens


def hash_embed(text: str, dim: int = 512, seed: int = 0, probes: int = 4) -> np.ndarray:
    """
    Deterministic feature-hashing embedding.

    Every token is hashed (seeded) ``probes`` times to a coordinate and a sign;
    contributions are accumulated and the result L2-normalized. Token order
    does not matter.

    Args:
        text: Input text
        dim: Output dimension (>= 8)
        seed: Hash seed
        probes: Coordinates per token

    Returns:
        Unit-norm vector of length ``dim``

    Raises:
        ValidationError: if dim < 8 or the text has no tokens
    """
    if dim < 8:
        raise ValidationError([f"hash embedding dimension must be >= 8, got {dim}"])
    tokens = tokenize(text)
    if not tokens:
        raise ValidationError([f"empty token stream for text {text!r}"])

    accumulator = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        for probe in range(probes):
            digest = hashlib.sha256(f"{seed}:{probe}:{token}".encode("utf-8")).digest()
            coordinate = int.from_bytes(digest[:8], "big") % dim
            sign = 1.0 if digest[8] & 1 else -1.0
            accumulator[coordinate] += sign

    if not np.any(accumulator):
        raise ValidationError([f"hash embedding of {text!r} cancelled to zero"])
    return normalize(accumulator)


class HashEmbedder:
    """Offline deterministic provider backed by ``hash_embed``."""

    name = "hash"

    def __init__(self, dim: int = 512, seed: int = 0, probes: int = 4):
        self.dimension = dim
        self.seed = seed
        self.probes = probes

    @property
    def fingerprint(self) -> str:
        return f"{self.name}:{self.dimension}:{self.seed}"

    def embed_batch(self, texts: List[str]) -> List[np.ndarray]:
        return [hash_embed(text, self.dimension, self.seed, self.probes) for text in texts]


class RemoteEmbedder:
    """
    Embedding provider reached over HTTP.

    Wire contract (docs/formats.md): POST ``{"model": ..., "texts": [...]}`` and
    receive ``{"dimension": D, "vectors": [[...], ...]}``. OpenAI-style
    ``{"data": [{"embedding": [...]}]}`` bodies are accepted too. Vectors are
    L2-normalized locally.
    """

    name = "remote"

    def __init__(
        self,
        url: str,
        model: str = "text2vec-base-multilingual",
        api_key: Optional[str] = None,
        auth_header: str = "Authorization",
        timeout: float = 30.0,
        batch_size: int = 32,
        max_in_flight: int = 4,
        dimension: Optional[int] = None,
        cassette: Optional[Cassette] = None,
        mode: str = "live",
    ):
        """
        Initialize the remote embedder.

        Args:
            url: Endpoint URL
            model: Model name sent with every request
            api_key: Secret placed in ``auth_header`` (Bearer scheme for Authorization)
            auth_header: Header carrying the secret
            timeout: Request timeout in seconds
            batch_size: Texts per request
            max_in_flight: Concurrent requests cap
            dimension: Expected dimension; learned from the first response if None
            cassette: Cassette for record/replay
            mode: live, record or replay
        """
        self.url = url
        self.model = model
        self.timeout = timeout
        self.batch_size = max(1, batch_size)
        self.max_in_flight = max(1, max_in_flight)
        self.dimension = dimension
        self.cassette = cassette
        self.mode = mode
        self.session = requests.Session()
        self.session.headers.update({"Content-Type": "application/json"})
        if api_key:
            value = f"Bearer {api_key}" if auth_header.lower() == "authorization" else api_key
            self.session.headers.update({auth_header: value})

    @property
    def fingerprint(self) -> str:
        return f"{self.name}:{self.model}:{self.dimension}"

    def request_digest(self, texts: List[str]) -> str:
        return prompt_digest(json.dumps({"model": self.model, "texts": texts}, sort_keys=True, ensure_ascii=False))

    def _post(self, texts: List[str]) -> Dict[str, Any]:
        try:
            response = self.session.post(self.url, json={"model": self.model, "texts": texts}, timeout=self.timeout)
            response.raise_for_status()
            body = response.json()
        except requests.Timeout as e:
            raise ProviderError(f"embedding request timed out after {self.timeout}s: {e}")
        except requests.RequestException as e:
            raise ProviderError(f"embedding request to {self.url} failed: {e}")
        except ValueError as e:
            raise ProviderError(f"embedding response is not JSON: {e}")
        return _read_vectors(body)

    def _fetch(self, texts: List[str]) -> Dict[str, Any]:
        digest = self.request_digest(texts)
        if self.mode == "replay":
            if self.cassette is None:
                raise ProviderError("replay mode requires a cassette")
            return self.cassette.lookup("embedding", digest)

        payload = self._post(texts)
        if self.mode == "record" and self.cassette is not None:
            self.cassette.record("embedding", digest, payload)
        return payload

    def embed_batch(self, texts: List[str]) -> List[np.ndarray]:
        batches = [texts[i:i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            payloads = list(pool.map(self._fetch, batches))

        vectors: List[np.ndarray] = []
        for batch, payload in zip(batches, payloads):
            if len(payload["vectors"]) != len(batch):
                raise ProviderError(f"provider returned {len(payload['vectors'])} vectors for {len(batch)} texts")
            for values in payload["vectors"]:
                stated = payload.get("dimension") or len(values)
                if len(values) != stated:
                    raise ProviderError(f"provider stated dimension {stated} but returned {len(values)}")
                if self.dimension is None:
                    self.dimension = stated
                    logger.info(f"Remote embedder {self.model} reports dimension {stated}")
                elif stated != self.dimension:
                    raise ProviderError(f"provider returned dimension {stated}, expected {self.dimension}")
                vectors.append(normalize(values))
        return vectors


def _read_vectors(body: Any) -> Dict[str, Any]:
    if isinstance(body, dict) and isinstance(body.get("vectors"), list):
        vectors = body["vectors"]
    elif isinstance(body, dict) and isinstance(body.get("data"), list):
        vectors = [item.get("embedding") for item in body["data"] if isinstance(item, dict)]
    else:
        raise ProviderError(f"embedding response has no vectors: {str(body)[:200]}")
    if not all(isinstance(v, list) for v in vectors):
        raise ProviderError("embedding response contains a non-list vector")
    dimension = body.get("dimension") if isinstance(body.get("dimension"), int) else None
    return {"dimension": dimension, "vectors": vectors}


def embed(text: str, provider) -> np.ndarray:
    """
    Embed one text with a provider.

    Raises:
        ValidationError: for empty text
        ProviderError: on transport failures or a wrong dimension
    """
    if not text or not text.strip():
        raise ValidationError(["cannot embed empty text"])
    return provider.embed_batch([text])[0]


def build_embedder(config, cassette: Optional[Cassette] = None, mode: str = "live"):
    """Create the provider selected by an EmbeddingConfig."""
    if config.provider == "remote":
        return RemoteEmbedder(
            url=config.url,
            model=config.model,
            api_key=os.getenv(config.api_key_env) if config.api_key_env else None,
            auth_header=config.auth_header,
            timeout=config.timeout,
            batch_size=config.batch_size,
            max_in_flight=config.max_in_flight,
            dimension=config.dimension,
            cassette=cassette,
            mode=mode,
        )
    return HashEmbedder(dim=config.dim, seed=config.seed)
