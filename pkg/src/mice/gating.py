"""Similarity gating: embeddings, cosine scores, and per-prompt weights.

Each prompt is scored by how similar its demonstrations are to the test
passage; a softmax over those scores yields the mixture weight of each
prompt. Embedding is pluggable: a deterministic feature-hashing embedder
ships with the package, and a remote endpoint client covers real encoders.
"""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .prompts import Prompt

logger = logging.getLogger(__name__)

_WORD_RE = re.compile(r"[a-z0-9]+")


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic bag-of-words embedding via feature hashing.

    Lowercased alphanumeric tokens are hashed (blake2b) into fixed buckets;
    vectors are L2-normalized. Bucket 0 is reserved for empty texts so they
    embed to a fixed unit vector instead of zero. No model weights, fully
    reproducible across platforms.
    """

    def __init__(self, dim: int = 1024):
        if dim < 2:
            raise ValueError("dim must be at least 2")
        self.dim = dim

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return 1 + int.from_bytes(digest, "big") % (self.dim - 1)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = _WORD_RE.findall(text.lower())
            if not tokens:
                out[row, 0] = 1.0
                continue
            for tok in tokens:
                out[row, self._bucket(tok)] += 1.0
            out[row] /= np.linalg.norm(out[row])
        return out


class RemoteEmbedder:
    """Client for an embedding endpoint: POST {"texts": [...]} -> {"vectors": [...]}."""

    def __init__(self, endpoint: str, token: Optional[str] = None, timeout: float = 60.0):
        import requests

        self._endpoint = endpoint.rstrip("/")
        self._token = token
        self._timeout = timeout
        self._session = requests.Session()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        resp = self._session.post(
            self._endpoint, json={"texts": list(texts)}, headers=headers,
            timeout=self._timeout,
        )
        resp.raise_for_status()
        vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        if vectors.shape[0] != len(texts):
            raise ValueError(
                f"endpoint returned {vectors.shape[0]} vectors for {len(texts)} texts"
            )
        return vectors


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero vectors score 0 against anything."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarities(test_vector: np.ndarray, demo_vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity of the test passage against each demonstration."""
    return np.array([cosine(test_vector, demo_vectors[i]) for i in range(demo_vectors.shape[0])])


@dataclass(frozen=True)
class GatingDistribution:
    """Normalized mixture weights keyed by prompt id."""

    weights: Mapping[int, float]

    def __post_init__(self) -> None:
        if not self.weights:
            raise ValueError("gating distribution must cover at least one prompt")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"gating weights sum to {total}, expected 1")
        for pid, w in self.weights.items():
            if w < 0.0:
                raise ValueError(f"negative weight for prompt {pid}")

    def __getitem__(self, prompt_id: int) -> float:
        return self.weights[prompt_id]

    @classmethod
    def uniform(cls, prompt_ids: Sequence[int]) -> "GatingDistribution":
        if not prompt_ids:
            raise ValueError("gating distribution must cover at least one prompt")
        w = 1.0 / len(prompt_ids)
        return cls(weights={pid: w for pid in prompt_ids})

    @classmethod
    def single(cls, prompt_id: int) -> "GatingDistribution":
        return cls(weights={prompt_id: 1.0})


def gate(
    prompts: Sequence[Prompt],
    demo_similarities: Sequence[float],
    combine: str = "sum",
) -> GatingDistribution:
    """Softmax mixture weights from summed demonstration similarities.

    Each prompt's score is the sum (or product, when ``combine`` is
    "product") of the cosine similarities of the demonstrations it actually
    contains after trimming; a prompt with no demonstrations scores 0. The
    softmax subtracts the max score, so a single prompt gets weight
    exactly 1.0 and weights always sum to 1 up to float rounding.
    """
    if not prompts:
        raise ValueError("cannot gate an empty prompt set")
    if combine not in ("sum", "product"):
        raise ValueError(f"unknown combine rule: {combine!r}")
    scores = np.zeros(len(prompts), dtype=np.float64)
    for row, prompt in enumerate(prompts):
        sims = [demo_similarities[i] for i in prompt.demo_indices]
        if not sims:
            scores[row] = 0.0
        elif combine == "sum":
            scores[row] = float(sum(sims))
        else:
            scores[row] = float(np.prod(sims))
    scores -= scores.max()
    exp = np.exp(scores)
    exp /= exp.sum()
    return GatingDistribution(
        weights={p.prompt_id: float(exp[row]) for row, p in enumerate(prompts)}
    )
