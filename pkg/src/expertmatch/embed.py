"""Document embeddings: a trainable feature-hashing encoder plus a loader for
externally precomputed vectors.

The hashing encoder is the stand-in for a pretrained text encoder: documents
become L2-normalized hashed bag-of-words vectors, projected through a single
trainable layer with tanh. Precomputed vectors (e.g. from a sentence-encoder
export) are served verbatim through the same embedding interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse as sp

from .tensor import Param, SplitMix64, Tape, Tensor, xavier_param

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = FNV_OFFSET_BASIS
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def hash_token(token: str, buckets: int) -> int:
    return fnv1a64(token) % buckets


@dataclass(frozen=True)
class Featurized:
    """Sparse L2-normalized token counts; indices strictly ascending."""

    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def featurize(tokens: Sequence[str], buckets: int) -> Featurized:
    """Hashed bag-of-words counts, L2-normalized; empty input gives a zero vector."""
    if not tokens:
        return Featurized(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    counts: dict[int, float] = {}
    for tok in tokens:
        b = hash_token(tok, buckets)
        counts[b] = counts.get(b, 0.0) + 1.0
    idx = np.array(sorted(counts), dtype=np.int64)
    vals = np.array([counts[i] for i in idx], dtype=np.float64)
    vals /= np.sqrt((vals * vals).sum())
    return Featurized(idx, vals)


@dataclass(frozen=True)
class EncoderConfig:
    hash_buckets: int = 4096
    dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"encoder dim must be >= 2, got {self.dim}")
        if self.hash_buckets < self.dim:
            raise ValueError(
                f"hash_buckets ({self.hash_buckets}) must be >= dim ({self.dim})")


class HashEncoder:
    """Trainable projection of hashed token counts into a dense embedding."""

    def __init__(self, config: EncoderConfig, projection: Param, bias: Param):
        self.config = config
        self.projection = projection
        self.bias = bias

    @classmethod
    def create(cls, config: EncoderConfig) -> "HashEncoder":
        rng = SplitMix64(config.seed)
        projection = xavier_param(rng, config.hash_buckets, config.dim, "encoder.projection")
        # input rows are L2-normalized sparse counts, so the effective fan-in is
        # 1 regardless of bucket count; rescale the bounds accordingly or the
        # embeddings start ~20x too small to carry gradient through tanh
        projection.value.data *= np.sqrt((config.hash_buckets + config.dim)
                                         / (1.0 + config.dim))
        bias = Param(np.zeros((1, config.dim)), "encoder.bias")
        return cls(config, projection, bias)

    def params(self) -> list[Param]:
        return [self.projection, self.bias]

    def encode(self, tokens: Sequence[str], tape: Tape | None = None) -> Tensor:
        """e = tanh(x @ projection + bias) for one document."""
        feats = featurize(tokens, self.config.hash_buckets)
        return self.encode_featurized([feats], tape)

    def encode_featurized(self, feats: Sequence[Featurized],
                          tape: Tape | None = None) -> Tensor:
        """Stack featurized documents into one CSR matrix and encode them all."""
        t = tape if tape is not None else Tape(recording=False)
        x = _stack_csr(feats, self.config.hash_buckets)
        h = t.sparse_matmul(x, self.projection)
        h = t.add(h, self.bias)
        return t.tanh(h)


def _stack_csr(feats: Sequence[Featurized], buckets: int) -> sp.csr_matrix:
    indptr = np.zeros(len(feats) + 1, dtype=np.int64)
    for i, f in enumerate(feats):
        indptr[i + 1] = indptr[i] + f.nnz
    if len(feats) == 0:
        raise ValueError("cannot encode an empty batch")
    indices = (np.concatenate([f.indices for f in feats])
               if indptr[-1] else np.empty(0, dtype=np.int64))
    data = (np.concatenate([f.values for f in feats])
            if indptr[-1] else np.empty(0, dtype=np.float64))
    return sp.csr_matrix((data, indices, indptr), shape=(len(feats), buckets))


class VectorStore:
    """Precomputed document vectors keyed by document id."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = vectors or {}

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, doc_id: str) -> np.ndarray:
        try:
            return self.vectors[doc_id]
        except KeyError:
            raise KeyError(f"no vector stored for document {doc_id!r}") from None


def load_vectors(path) -> VectorStore:
    """Read a vector file: a {"dim": D} header line, then {"id", "vec"} lines."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            dim = int(header["dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: bad vector file header: {exc}") from exc
        store = VectorStore(dim)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id, vec = rec["id"], rec["vec"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed vector record: {exc}") from exc
            arr = np.asarray(vec, dtype=np.float64).reshape(1, -1)
            if arr.shape[1] != dim:
                raise ValueError(
                    f"{path}:{lineno}: vector for {doc_id!r} has dim {arr.shape[1]}, "
                    f"header says {dim}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{path}:{lineno}: non-finite entry in vector {doc_id!r}")
            if doc_id in store:
                raise ValueError(f"{path}:{lineno}: duplicate vector id {doc_id!r}")
            store.vectors[doc_id] = arr
    return store


def save_vectors(path, store: VectorStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": store.dim}) + "\n")
        for doc_id, arr in store.vectors.items():
            fh.write(json.dumps({"id": doc_id, "vec": arr.reshape(-1).tolist()}) + "\n")


# -- embedding providers -------------------------------------------------------


class HashEmbedder:
    """Embeds documents through the trainable hashing encoder; featurization of
    each document is computed once and cached."""

    def __init__(self, encoder: HashEncoder, tokens_by_id: Mapping[str, Sequence[str]]):
        self.encoder = encoder
        self.tokens_by_id = tokens_by_id
        self._feats: dict[str, Featurized] = {}

    @property
    def dim(self) -> int:
        return self.encoder.config.dim

    @property
    def trainable(self) -> bool:
        return True

    def params(self) -> list[Param]:
        return self.encoder.params()

    def _featurized(self, doc_id: str) -> Featurized:
        f = self._feats.get(doc_id)
        if f is None:
            f = featurize(self.tokens_by_id[doc_id], self.encoder.config.hash_buckets)
            self._feats[doc_id] = f
        return f

    def embed(self, doc_ids: Sequence[str], tape: Tape | None = None) -> Tensor:
        feats = [self._featurized(d) for d in doc_ids]
        return self.encoder.encode_featurized(feats, tape)

    def embed_tokens(self, tokens: Sequence[str], tape: Tape | None = None) -> Tensor:
        """Ad-hoc document (e.g. a fresh query string) outside the corpus."""
        return self.encoder.encode(tokens, tape)


class StoreEmbedder:
    """Serves precomputed vectors verbatim; nothing is trainable."""

    def __init__(self, store: VectorStore):
        self.store = store

    @property
    def dim(self) -> int:
        return self.store.dim

    @property
    def trainable(self) -> bool:
        return False

    def params(self) -> list[Param]:
        return []

    def embed(self, doc_ids: Sequence[str], tape: Tape | None = None) -> Tensor:
        rows = [self.store.get(d).reshape(-1) for d in doc_ids]
        return Tensor(np.vstack(rows))

    def embed_tokens(self, tokens: Sequence[str], tape: Tape | None = None) -> Tensor:
        raise ValueError("precomputed vector stores cannot embed ad-hoc text; "
                         "use a hashing encoder for free-form queries")
