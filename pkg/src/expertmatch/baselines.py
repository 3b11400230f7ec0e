"""Non-neural and simple neural comparison rankers.

Every baseline returns a full permutation of the candidate pool with
deterministic tie-breaking. The non-neural rankers carry rank-derived
placeholder scores except cosine similarity, which reports the raw cosine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import (Corpus, DocumentSet, Query, SplitSpec, dialogue_doc_id,
                     profile_doc_id, query_doc_id, training_counts)
from .embed import HashEmbedder, HashEncoder, StoreEmbedder, VectorStore
from .ranker import ModelConfig, RankResult, TrainResult, train
from .tensor import SplitMix64, Tape
from .embed import fnv1a64

BASELINE_KINDS = ("random", "frequency", "knn", "cos_profile", "cos_dialogue",
                  "mlp_p", "mlp_d", "mlp_pd")


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "random"
    k_neighbors: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


def _placeholder_result(ordered: Sequence[str]) -> RankResult:
    n = len(ordered)
    return RankResult(tuple((d, (n - i) / (n + 1)) for i, d in enumerate(ordered)))


def rank_random(query_id: str, pool: Sequence[str], seed: int) -> RankResult:
    """Seeded uniform permutation; the same seed and query id always agree."""
    rng = SplitMix64((seed ^ fnv1a64(query_id)) & ((1 << 64) - 1))
    ordered = list(pool)
    rng.shuffle(ordered)
    return _placeholder_result(ordered)


def rank_frequency(pool: Sequence[str], train_counts: Mapping[str, int]) -> RankResult:
    """Query-independent: descending training-dialogue count, ties by id."""
    ordered = sorted(pool, key=lambda d: (-train_counts.get(d, 0), d))
    return _placeholder_result(ordered)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return -1.0
    return float(a @ b / (na * nb))


class FrozenIndex:
    """Embeddings of corpus documents under a frozen (pre-ranking) encoder,
    shared by the KNN and cosine baselines."""

    def __init__(self, corpus: Corpus, split: SplitSpec, documents: DocumentSet,
                 encoder: HashEncoder | None = None, store: VectorStore | None = None):
        if (encoder is None) == (store is None):
            raise ValueError("provide exactly one of encoder or store")
        self.corpus = corpus
        self.split = split
        self.documents = documents
        self.embedder = (HashEmbedder(encoder, documents.tokens_by_id)
                         if encoder is not None else StoreEmbedder(store))
        self._cache: dict[str, np.ndarray] = {}
        self.train_queries: list[tuple[str, str]] = []  # (query doc, doctor)
        for did in sorted(split.train_dialogues):
            self.train_queries.append((query_doc_id(did), corpus.dialogues[did].doctor_id))

    def vector(self, doc_id: str) -> np.ndarray:
        v = self._cache.get(doc_id)
        if v is None:
            v = self.embedder.embed([doc_id], Tape(recording=False)).data[0].copy()
            self._cache[doc_id] = v
        return v

    def query_vector(self, query: Query) -> np.ndarray:
        return self.vector(query_doc_id(query.source_dialogue_id))

    def profile_vector(self, doctor_id: str) -> np.ndarray:
        return self.vector(profile_doc_id(doctor_id))

    def dialogue_mean_vector(self, doctor_id: str) -> np.ndarray:
        train_ids = [d for d in self.corpus.doctors[doctor_id].dialogue_ids
                     if d in self.split.train_dialogues]
        if not train_ids:
            return np.zeros(self.embedder.dim)
        vecs = [self.vector(dialogue_doc_id(d)) for d in train_ids]
        return np.mean(vecs, axis=0)


def rank_knn(query: Query, pool: Sequence[str], index: FrozenIndex,
             k: int = 20, train_counts: Mapping[str, int] | None = None) -> RankResult:
    """Vote by the handlers of the k nearest training queries in cosine space;
    ties broken by training frequency, then id."""
    qv = index.query_vector(query)
    sims = [(_cosine(qv, index.vector(doc)), doctor)
            for doc, doctor in index.train_queries]
    sims.sort(key=lambda t: -t[0])
    votes: dict[str, int] = {}
    for _, doctor in sims[:min(k, len(sims))]:
        votes[doctor] = votes.get(doctor, 0) + 1
    counts = train_counts or {}
    ordered = sorted(pool, key=lambda d: (-votes.get(d, 0), -counts.get(d, 0), d))
    return _placeholder_result(ordered)


def rank_cosine(query: Query, pool: Sequence[str], index: FrozenIndex,
                source: str = "profile") -> RankResult:
    """Cosine of the query embedding against the profile or the mean dialogue
    embedding; zero-vector operands score -1."""
    if source not in ("profile", "dialogue_mean"):
        raise ValueError(f"unknown cosine source {source!r}")
    qv = index.query_vector(query)
    scores = {}
    for d in pool:
        dv = (index.profile_vector(d) if source == "profile"
              else index.dialogue_mean_vector(d))
        scores[d] = _cosine(qv, dv)
    ordered = sorted(pool, key=lambda d: (-scores[d], d))
    return RankResult(tuple((d, scores[d]) for d in ordered))


def train_mlp_baseline(corpus: Corpus, split: SplitSpec, variant: str,
                       cfg: ModelConfig, encoder: HashEncoder | None = None,
                       store: VectorStore | None = None,
                       stoplist=frozenset()) -> TrainResult:
    """MLP over e_profile (P+Q), the mean dialogue embedding (D+Q), or their
    elementwise average (P+D+Q); training is the shared ranking loop with the
    attention encoder bypassed."""
    mode = {"P+Q": "mlp_p", "D+Q": "mlp_d", "P+D+Q": "mlp_pd"}.get(variant, variant)
    if mode not in ("mlp_p", "mlp_d", "mlp_pd"):
        raise ValueError(f"unknown MLP baseline variant {variant!r}")
    cfg = ModelConfig(**{**cfg.__dict__, "encoder_mode": mode})
    return train(corpus, split, cfg, encoder=encoder, store=store, stoplist=stoplist)
