"""Stage-2 training and inference: query encoding, the MLP matching scorer,
weighted binary cross-entropy with negative sampling, the Adam loop with early
stopping, and candidate ranking/evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics as metrics_mod
from .corpus import (Corpus, DocumentSet, Query, SplitSpec, build_documents,
                     candidate_pool, dialogue_doc_id, profile_doc_id, query_doc_id)
from .embed import HashEmbedder, HashEncoder, StoreEmbedder, VectorStore
from .expertise import (ATTENTION_MODES, DoctorEncoderParams, EmptyDialoguesError,
                        HeadExplanation, encode_doctor, explain_heads)
from .tensor import (AdamState, Param, SplitMix64, Tape, Tensor, adam_step,
                     backward, derive_seed, xavier_param)

MODE_MLP_PROFILE = "mlp_p"
MODE_MLP_DIALOGUE = "mlp_d"
MODE_MLP_BOTH = "mlp_pd"
MLP_MODES = (MODE_MLP_PROFILE, MODE_MLP_DIALOGUE, MODE_MLP_BOTH)

_STREAM_NEG = 1
_STREAM_VAL = 2
_STREAM_DOCTOR_INIT = 3
_STREAM_MLP_INIT = 4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    heads: int = 6
    mlp_hidden: int = 256
    lam: float = 5.0
    neg_ratio: int = 10
    lr: float = 0.008
    batch: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    pool_size: int = 100
    encoder_mode: str = "full"
    max_dialogues: int | None = None

    def __post_init__(self):
        if self.lam <= 1.0:
            raise ValueError(f"lambda must be > 1 to up-weight positives, got {self.lam}")
        if self.neg_ratio < 1:
            raise ValueError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if self.batch < 1 or self.max_epochs < 1 or self.pool_size < 1:
            raise ValueError("batch, max_epochs and pool_size must be >= 1")
        if self.encoder_mode not in ATTENTION_MODES + MLP_MODES:
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")


@dataclass
class MlpParams:
    w1: Param
    b1: Param
    w_out: Param
    b_out: Param

    @classmethod
    def create(cls, in_dim: int, hidden: int, seed: int) -> "MlpParams":
        rng = SplitMix64(seed)
        return cls(
            w1=xavier_param(rng, in_dim, hidden, "mlp.W1"),
            b1=Param(np.zeros((1, hidden)), "mlp.b1"),
            w_out=xavier_param(rng, hidden, 1, "mlp.W_out"),
            b_out=Param(np.zeros((1, 1)), "mlp.b_out"),
        )

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w_out, self.b_out]


@dataclass(frozen=True)
class RankResult:
    entries: tuple[tuple[str, float], ...]

    def doctor_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def top(self, k: int) -> list[tuple[str, float]]:
        return list(self.entries[:k])


def mlp_scores(tape: Tape, e_doctor: Tensor, e_query: Tensor, mlp: MlpParams) -> Tensor:
    """Matching scores for row-aligned doctor/query embedding matrices."""
    joint = tape.concat_cols([e_doctor, e_query])
    hidden = tape.tanh(tape.add(tape.matmul(joint, mlp.w1), mlp.b1))
    return tape.sigmoid(tape.add(tape.matmul(hidden, mlp.w_out), mlp.b_out))


def score(e_doctor: Tensor, e_query: Tensor, mlp: MlpParams) -> float:
    """Matching score for a single doctor/query embedding pair."""
    return mlp_scores(Tape(recording=False), e_doctor, e_query, mlp).item()


def weighted_bce(tape: Tape, scores: Tensor, labels: np.ndarray, lam: float) -> Tensor:
    """L = -sum(lam * y * ln s + (1 - y) * ln(1 - s)); scores clamped before log."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape != scores.shape:
        raise ValueError(f"labels shape {y.shape} does not match scores {scores.shape}")
    s = tape.clip(scores, 1e-12, 1.0 - 1e-12)
    one_minus = tape.add(tape.const(np.ones_like(y)), tape.scale(s, -1.0))
    pos = tape.elementwise_mul(tape.const(lam * y), tape.log(s))
    neg = tape.elementwise_mul(tape.const(1.0 - y), tape.log(one_minus))
    return tape.scale(tape.sum_all(tape.add(pos, neg)), -1.0)


def loss(scores: Sequence[float], labels: Sequence[int], lam: float) -> float:
    """Scalar weighted BCE over already-computed scores."""
    t = Tape(recording=False)
    s = Tensor(np.asarray(scores, dtype=np.float64).reshape(-1, 1))
    return weighted_bce(t, s, np.asarray(labels), lam).item()


def sample_negatives(pool: Sequence[str], gold_doctor_id: str, neg_ratio: int,
                     rng: SplitMix64) -> list[str]:
    """neg_ratio distinct non-gold doctors drawn uniformly from the pool."""
    others = [d for d in pool if d != gold_doctor_id]
    if gold_doctor_id not in pool:
        raise ValueError(f"gold doctor {gold_doctor_id!r} is not in the pool")
    if len(others) < neg_ratio:
        raise ValueError(
            f"pool of {len(pool)} is too small for {neg_ratio} negatives")
    return rng.sample(others, neg_ratio)


# -- the assembled model ---------------------------------------------------------


@dataclass
class RecModel:
    config: ModelConfig
    embedder: HashEmbedder | StoreEmbedder
    doctor_params: DoctorEncoderParams | None
    mlp: MlpParams
    pool: list[str]
    profile_docs: dict[str, str]
    dialogue_docs: dict[str, list[str]]
    departments: dict[str, str]
    documents: DocumentSet | None = None

    @property
    def dim(self) -> int:
        return self.embedder.dim

    def params(self) -> list[Param]:
        out = list(self.embedder.params())
        if self.doctor_params is not None:
            out.extend(self.doctor_params.params())
        out.extend(self.mlp.params())
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.value.data.copy() for p in self.params()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, arr in zip(self.params(), snap):
            p.value.data[:] = arr


def build_model(corpus: Corpus, split: SplitSpec, cfg: ModelConfig,
                encoder: HashEncoder | None = None,
                store: VectorStore | None = None,
                documents: DocumentSet | None = None,
                stoplist=frozenset()) -> RecModel:
    """Assemble a model with fresh attention/MLP parameters around the given
    encoder (trainable hashing) or vector store (frozen external embeddings)."""
    if (encoder is None) == (store is None):
        raise ValueError("provide exactly one of encoder or store")
    if documents is None:
        documents = build_documents(corpus, stoplist)
    if encoder is not None:
        embedder = HashEmbedder(encoder, documents.tokens_by_id)
    else:
        embedder = StoreEmbedder(store)

    pool = candidate_pool(corpus, split, cfg.pool_size)
    train_ids = split.train_dialogues
    profile_docs, dialogue_docs = {}, {}
    for doctor_id in pool:
        profile_docs[doctor_id] = profile_doc_id(doctor_id)
        kept = [d for d in corpus.doctors[doctor_id].dialogue_ids if d in train_ids]
        if cfg.max_dialogues is not None:
            kept = kept[-cfg.max_dialogues:]
        dialogue_docs[doctor_id] = [dialogue_doc_id(d) for d in kept]

    dim = embedder.dim
    doctor_params = None
    if cfg.encoder_mode in ATTENTION_MODES:
        doctor_params = DoctorEncoderParams.create(
            dim, cfg.heads, cfg.encoder_mode, derive_seed(cfg.seed, _STREAM_DOCTOR_INIT))
    mlp = MlpParams.create(2 * dim, cfg.mlp_hidden, derive_seed(cfg.seed, _STREAM_MLP_INIT))
    departments = {d: corpus.doctors[d].department for d in pool}
    return RecModel(cfg, embedder, doctor_params, mlp, pool,
                    profile_docs, dialogue_docs, departments, documents)


def _doctor_matrix(tape: Tape, model: RecModel, doctor_ids: Sequence[str],
                   collect_maps: bool = False):
    """Encode doctors into a row-stacked matrix; returns (matrix, row index map,
    attention maps when requested)."""
    mode = model.config.encoder_mode
    needs_dialogues = mode not in ("no_dialogue", MODE_MLP_PROFILE)
    doc_ids: list[str] = []
    spans: list[tuple[str, int, int, int]] = []
    for d in doctor_ids:
        p_idx = len(doc_ids)
        doc_ids.append(model.profile_docs[d])
        start = len(doc_ids)
        if needs_dialogues:
            doc_ids.extend(model.dialogue_docs[d])
        spans.append((d, p_idx, start, len(doc_ids)))

    emb = model.embedder.embed(doc_ids, tape)
    rows, maps = [], {}
    for d, p_idx, start, end in spans:
        profile_vec = tape.select_rows(emb, [p_idx])
        dlg_mat = tape.select_rows(emb, list(range(start, end))) if end > start else None
        if mode in ATTENTION_MODES:
            if dlg_mat is None and mode != "no_dialogue":
                raise EmptyDialoguesError(
                    f"doctor {d!r} has no training dialogues; mode {mode!r} needs them")
            enc = encode_doctor(profile_vec, dlg_mat, model.doctor_params, tape)
            rows.append(enc.vector)
            if collect_maps:
                maps[d] = enc.attention_maps
        elif mode == MODE_MLP_PROFILE:
            rows.append(profile_vec)
        else:
            if dlg_mat is None:
                raise EmptyDialoguesError(
                    f"doctor {d!r} has no training dialogues; mode {mode!r} needs them")
            mean_dlg = tape.mean_rows(dlg_mat)
            if mode == MODE_MLP_DIALOGUE:
                rows.append(mean_dlg)
            else:  # elementwise average of profile and mean dialogue embedding
                rows.append(tape.scale(tape.add(profile_vec, mean_dlg), 0.5))
    matrix = tape.concat_rows(rows)
    row_of = {d: i for i, d in enumerate(doctor_ids)}
    return matrix, row_of, maps


def _example_loss(tape: Tape, model: RecModel,
                  examples: Sequence[tuple[str, str, int]]) -> Tensor:
    """Loss over (query_doc_id, doctor_id, label) triples."""
    doctors = list(dict.fromkeys(d for _, d, _ in examples))
    q_docs = list(dict.fromkeys(q for q, _, _ in examples))
    d_matrix, d_row, _ = _doctor_matrix(tape, model, doctors)
    q_matrix = model.embedder.embed(q_docs, tape)
    q_row = {q: i for i, q in enumerate(q_docs)}
    e_d = tape.select_rows(d_matrix, [d_row[d] for _, d, _ in examples])
    e_q = tape.select_rows(q_matrix, [q_row[q] for q, _, _ in examples])
    scores = mlp_scores(tape, e_d, e_q, model.mlp)
    labels = np.array([lbl for _, _, lbl in examples], dtype=np.float64)
    return weighted_bce(tape, scores, labels, model.config.lam)


def _build_examples(queries: Sequence[tuple[str, str]], pool: Sequence[str],
                    neg_ratio: int, rng: SplitMix64) -> list[tuple[str, str, int]]:
    """Each positive query/doctor pair grouped with its own sampled negatives."""
    examples = []
    for q_doc, gold in queries:
        examples.append((q_doc, gold, 1))
        for neg in sample_negatives(pool, gold, neg_ratio, rng):
            examples.append((q_doc, neg, 0))
    return examples


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0

    def to_json(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run}


@dataclass
class TrainResult:
    model: RecModel
    history: TrainHistory


def train(corpus: Corpus, split: SplitSpec, cfg: ModelConfig,
          encoder: HashEncoder | None = None,
          store: VectorStore | None = None,
          stoplist=frozenset(),
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Minibatch Adam on the weighted BCE; keeps the parameters with the lowest
    validation loss and stops early after ``patience`` epochs without improvement
    (``patience=0`` disables early stopping)."""
    model = build_model(corpus, split, cfg, encoder=encoder, store=store,
                        stoplist=stoplist)
    pool_set = set(model.pool)

    train_queries = []
    for did in sorted(split.train_dialogues):
        gold = corpus.dialogues[did].doctor_id
        if gold in pool_set:
            train_queries.append((query_doc_id(did), gold))
    if not train_queries:
        raise ValueError("no training queries with a gold doctor inside the pool")

    val_pairs = [(query_doc_id(q.source_dialogue_id), q.gold_doctor_id)
                 for q in split.queries_of("val") if q.gold_doctor_id in pool_set]

    rng = SplitMix64(derive_seed(cfg.seed, _STREAM_NEG))
    params = model.params()
    adam = AdamState()
    history = TrainHistory()
    best_val = float("inf")
    best_snapshot = model.snapshot()
    since_best = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        rng.shuffle(train_queries)
        examples = _build_examples(train_queries, model.pool, cfg.neg_ratio, rng)
        epoch_loss = 0.0
        for b in range(0, len(examples), cfg.batch):
            batch = examples[b:b + cfg.batch]
            tape = Tape()
            batch_loss = _example_loss(tape, model, batch)
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b // cfg.batch}")
            backward(tape, batch_loss)
            step += 1
            adam_step(params, adam, cfg.lr, t=step)
            epoch_loss += value
        history.train_loss.append(epoch_loss / max(1, len(examples)))

        if val_pairs:
            val_rng = SplitMix64(derive_seed(cfg.seed, _STREAM_VAL))
            val_examples = _build_examples(val_pairs, model.pool, cfg.neg_ratio, val_rng)
            val_value = 0.0
            for b in range(0, len(val_examples), cfg.batch):
                chunk = val_examples[b:b + cfg.batch]
                val_value += _example_loss(Tape(recording=False), model, chunk).item()
            val_value /= len(val_examples)
        else:
            val_value = history.train_loss[-1]
        history.val_loss.append(val_value)
        history.epochs_run = epoch
        if progress:
            progress(f"epoch {epoch}: train {history.train_loss[-1]:.4f} "
                     f"val {val_value:.4f}")

        if val_value < best_val:
            best_val = val_value
            best_snapshot = model.snapshot()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if cfg.patience > 0 and since_best >= cfg.patience:
                break

    model.restore(best_snapshot)
    return TrainResult(model, history)


# -- inference --------------------------------------------------------------------


def _query_vector(model: RecModel, query) -> Tensor:
    tape = Tape(recording=False)
    if isinstance(query, Query):
        doc = query_doc_id(query.source_dialogue_id)
        if model.documents is not None and doc in model.documents:
            return model.embedder.embed([doc], tape)
        return model.embedder.embed_tokens(list(query.tokens), tape)
    if isinstance(query, str):
        if model.documents is not None and query in model.documents:
            return model.embedder.embed([query], tape)
        raise KeyError(f"unknown query document {query!r}")
    return model.embedder.embed_tokens(list(query), tape)


def rank(model: RecModel, query, pool: Sequence[str] | None = None) -> RankResult:
    """Score every pool doctor against the query; descending score, ties by id."""
    pool = list(pool) if pool is not None else list(model.pool)
    if not pool:
        raise ValueError("rank needs a non-empty candidate pool")
    tape = Tape(recording=False)
    d_matrix, d_row, _ = _doctor_matrix(tape, model, pool)
    e_q = _query_vector(model, query)
    tiled_q = Tensor(np.repeat(e_q.data, len(pool), axis=0))
    scores = mlp_scores(tape, d_matrix, tiled_q, model.mlp).data[:, 0]
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))
    return RankResult(tuple((pool[i], float(scores[i])) for i in order))


def rank_queries(model: RecModel, queries: Sequence[Query]) -> list[RankResult]:
    """Batch ranking over a frozen model; one doctor encoding pass for all queries."""
    tape = Tape(recording=False)
    pool = list(model.pool)
    d_matrix, _, _ = _doctor_matrix(tape, model, pool)
    results = []
    for q in queries:
        e_q = _query_vector(model, q)
        tiled_q = Tensor(np.repeat(e_q.data, len(pool), axis=0))
        scores = mlp_scores(tape, d_matrix, tiled_q, model.mlp).data[:, 0]
        order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))
        results.append(RankResult(tuple((pool[i], float(scores[i])) for i in order)))
    return results


_BUCKET_KEYS = ("query_len", "dialogue_len", "profile_len", "department")


def _bucket_value(model: RecModel, query: Query, key: str):
    gold = query.gold_doctor_id
    if key == "query_len":
        return len(query.tokens)
    if key == "profile_len":
        return model.documents.length(model.profile_docs[gold])
    if key == "dialogue_len":
        docs = model.dialogue_docs[gold]
        if not docs:
            return 0.0
        return sum(model.documents.length(d) for d in docs) / len(docs)
    if key == "department":
        return model.departments[gold]
    raise ValueError(f"unknown bucket key {key!r}; expected one of {_BUCKET_KEYS}")


def _bucket_label(value, edges: Sequence[float]) -> str:
    for i in range(len(edges) - 1, -1, -1):
        if value >= edges[i]:
            hi = edges[i + 1] if i + 1 < len(edges) else None
            return f"{edges[i]:g}-{hi:g}" if hi is not None else f"{edges[i]:g}+"
    return f"<{edges[0]:g}"


def _quartile_edges(values: Sequence[float]) -> list[float]:
    qs = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75])
    edges = sorted(set(float(q) for q in qs))
    return edges


def evaluate_rankings(queries: Sequence[Query], rankings: Sequence[RankResult],
                      bucket_values: Sequence | None = None,
                      bucket_edges: Sequence[float] | None = None) -> metrics_mod.MetricsReport:
    per_query = []
    for q, r in zip(queries, rankings):
        ranking = metrics_mod.judged(r.doctor_ids(), {q.gold_doctor_id})
        per_query.append(metrics_mod.score_ranking(ranking))
    report = metrics_mod.aggregate(per_query)

    if bucket_values is not None:
        numeric = all(not isinstance(v, str) for v in bucket_values)
        if numeric:
            edges = list(bucket_edges) if bucket_edges else _quartile_edges(bucket_values)
            labels = [_bucket_label(v, edges) for v in bucket_values]
        else:
            labels = [str(v) for v in bucket_values]
        groups: dict[str, list[dict]] = {}
        for label, m in zip(labels, per_query):
            groups.setdefault(label, []).append(m)
        report.buckets = {label: metrics_mod.aggregate(ms)
                          for label, ms in sorted(groups.items())}
    return report


def evaluate(model: RecModel, queries: Sequence[Query], bucket: str | None = None,
             bucket_edges: Sequence[float] | None = None) -> metrics_mod.MetricsReport:
    """Rank each query against the model pool and average the IR metrics,
    optionally grouped by a bucketing key."""
    if not queries:
        raise ValueError("evaluate needs at least one query")
    usable = [q for q in queries if q.gold_doctor_id in set(model.pool)]
    if not usable:
        raise ValueError("no queries have their gold doctor inside the pool")
    rankings = rank_queries(model, usable)
    bucket_values = None
    if bucket is not None:
        bucket_values = [_bucket_value(model, q, bucket) for q in usable]
    return evaluate_rankings(usable, rankings, bucket_values, bucket_edges)


def explain(model: RecModel, doctor_id: str, k: int = 5) -> list[HeadExplanation]:
    """Per-head attention weights over the doctor's training dialogues and the
    top-k tokens by attended-dialogue weight. Attention is profile-queried, so
    the explanation is a property of the doctor under the trained model."""
    if model.config.encoder_mode not in ATTENTION_MODES:
        raise ValueError(f"mode {model.config.encoder_mode!r} has no attention maps")
    if model.documents is None:
        raise ValueError("explain needs corpus documents attached to the model")
    tape = Tape(recording=False)
    _, _, maps = _doctor_matrix(tape, model, [doctor_id], collect_maps=True)
    token_sets = [frozenset(model.documents[d]) for d in model.dialogue_docs[doctor_id]]
    if model.config.encoder_mode == "no_dialogue":
        token_sets = [frozenset(model.documents[model.profile_docs[doctor_id]])]
    return explain_heads(maps[doctor_id], token_sets, k)


# -- persistence --------------------------------------------------------------------


def save_model(model: RecModel, ckpt_path) -> None:
    from .tensor import save_checkpoint
    save_checkpoint(ckpt_path, model.params(), extra_header={"stage": "ranker"})


def load_model_params(model: RecModel, ckpt_path) -> None:
    from .tensor import load_into
    load_into(ckpt_path, model.params())
