"""Stage-1 alignment: classify whether a profile and a dialogue come from the
same doctor, fine-tuning the encoder so the two writing registers land in one
semantic space before recommendation training. The classifier head is thrown
away afterwards; only the encoder carries over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, SplitSpec, build_documents, dialogue_doc_id, profile_doc_id
from .embed import HashEmbedder, HashEncoder
from .ranker import MlpParams, TrainingDivergedError, mlp_scores, weighted_bce
from .tensor import (AdamState, SplitMix64, Tape, adam_step, backward, derive_seed)

_STREAM_PAIRS = 11
_STREAM_HOLDOUT = 12
_STREAM_HEAD_INIT = 13
_STREAM_EPOCH = 14

# the shared loss with lambda=1 is plain unweighted BCE
_UNWEIGHTED = 1.0


@dataclass(frozen=True)
class PairExample:
    profile_doc: str
    dialogue_doc: str
    label: int


@dataclass(frozen=True)
class PretrainConfig:
    neg_ratio: int = 1
    epochs: int = 40
    batch: int = 64
    lr: float = 0.02
    patience: int = 10
    seed: int = 0
    mlp_hidden: int = 256
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.neg_ratio < 1:
            raise ValueError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")


def make_pairs(corpus: Corpus, split: SplitSpec, cfg: PretrainConfig) -> list[PairExample]:
    """One positive per (profile, training dialogue) of the same doctor, plus
    ``neg_ratio`` negatives per positive drawn from other doctors' dialogues."""
    if len(corpus.doctors) < 2:
        raise ValueError("pair generation needs at least two doctors for negatives")
    train_ids = split.train_dialogues
    rng = SplitMix64(derive_seed(cfg.seed, _STREAM_PAIRS))

    by_doctor: dict[str, list[str]] = {}
    for doctor_id in sorted(corpus.doctors):
        dlgs = [d for d in corpus.doctors[doctor_id].dialogue_ids if d in train_ids]
        if dlgs:
            by_doctor[doctor_id] = dlgs

    pairs: list[PairExample] = []
    doctor_list = list(by_doctor)
    for doctor_id, dlgs in by_doctor.items():
        others = [d for d in doctor_list if d != doctor_id]
        profile = profile_doc_id(doctor_id)
        for did in dlgs:
            pairs.append(PairExample(profile, dialogue_doc_id(did), 1))
            for _ in range(cfg.neg_ratio):
                other = others[rng.below(len(others))]
                neg_dlg = by_doctor[other][rng.below(len(by_doctor[other]))]
                pairs.append(PairExample(profile, dialogue_doc_id(neg_dlg), 0))
    return pairs


@dataclass
class PretrainReport:
    accuracy: float
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "train_loss": self.train_loss,
                "holdout_loss": self.holdout_loss, "best_epoch": self.best_epoch,
                "epochs_run": self.epochs_run}


@dataclass
class PretrainResult:
    encoder: HashEncoder
    classifier: MlpParams
    report: PretrainReport


def _pair_scores(tape: Tape, embedder: HashEmbedder, classifier: MlpParams,
                 batch: Sequence[PairExample]):
    doc_ids = list(dict.fromkeys([p.profile_doc for p in batch]
                                 + [p.dialogue_doc for p in batch]))
    emb = embedder.embed(doc_ids, tape)
    row = {d: i for i, d in enumerate(doc_ids)}
    e_p = tape.select_rows(emb, [row[p.profile_doc] for p in batch])
    e_d = tape.select_rows(emb, [row[p.dialogue_doc] for p in batch])
    return mlp_scores(tape, e_p, e_d, classifier)


def pretrain(encoder: HashEncoder, pairs: Sequence[PairExample], cfg: PretrainConfig,
             corpus: Corpus | None = None, stoplist=frozenset(),
             documents=None,
             progress: Callable[[str], None] | None = None) -> PretrainResult:
    """Train the same-doctor classifier end to end; gradients flow into the
    encoder projection. Reports held-out accuracy on a seeded 10% slice."""
    if not pairs:
        raise ValueError("pretrain needs a non-empty pair list")
    labels = {p.label for p in pairs}
    if labels != {0, 1}:
        raise ValueError(f"pretrain needs both labels present, got {sorted(labels)}")
    if documents is None:
        if corpus is None:
            raise ValueError("pass either corpus or prebuilt documents")
        documents = build_documents(corpus, stoplist)
    embedder = HashEmbedder(encoder, documents.tokens_by_id)
    classifier = MlpParams.create(2 * encoder.config.dim, cfg.mlp_hidden,
                                  derive_seed(cfg.seed, _STREAM_HEAD_INIT))

    pairs = list(pairs)
    holdout_rng = SplitMix64(derive_seed(cfg.seed, _STREAM_HOLDOUT))
    holdout_rng.shuffle(pairs)
    n_hold = max(1, int(len(pairs) * cfg.holdout_fraction))
    holdout, training = pairs[:n_hold], pairs[n_hold:]
    if not training:
        raise ValueError("all pairs landed in the holdout slice; need more pairs")

    params = embedder.params() + classifier.params()
    adam = AdamState()
    rng = SplitMix64(derive_seed(cfg.seed, _STREAM_EPOCH))
    report = PretrainReport(accuracy=0.0)
    # select on held-out accuracy: BCE keeps rising from overconfident errors
    # long after the decision boundary has stopped moving
    best_acc = -1.0
    best_snap = [p.value.data.copy() for p in params]
    since_best, step = 0, 0

    def holdout_eval() -> tuple[float, float]:
        total_loss, hits = 0.0, 0
        for b in range(0, len(holdout), cfg.batch):
            chunk = holdout[b:b + cfg.batch]
            tape = Tape(recording=False)
            scores = _pair_scores(tape, embedder, classifier, chunk)
            y = np.array([p.label for p in chunk], dtype=np.float64)
            total_loss += weighted_bce(tape, scores, y,
                                       _UNWEIGHTED).item()
            hits += int(((scores.data[:, 0] > 0.5) == (y > 0.5)).sum())
        return total_loss / len(holdout), hits / len(holdout)

    for epoch in range(1, cfg.epochs + 1):
        rng.shuffle(training)
        epoch_loss = 0.0
        for b in range(0, len(training), cfg.batch):
            chunk = training[b:b + cfg.batch]
            tape = Tape()
            scores = _pair_scores(tape, embedder, classifier, chunk)
            y = np.array([p.label for p in chunk], dtype=np.float64)
            batch_loss = weighted_bce(tape, scores, y, _UNWEIGHTED)
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite pretrain loss at epoch {epoch}, batch {b // cfg.batch}")
            backward(tape, batch_loss)
            step += 1
            adam_step(params, adam, cfg.lr, t=step)
            epoch_loss += value
        report.train_loss.append(epoch_loss / len(training))

        hold_loss, hold_acc = holdout_eval()
        report.holdout_loss.append(hold_loss)
        report.epochs_run = epoch
        if progress:
            progress(f"pretrain epoch {epoch}: train {report.train_loss[-1]:.4f} "
                     f"holdout {hold_loss:.4f} acc {hold_acc:.3f}")
        if hold_acc > best_acc:
            best_acc = hold_acc
            best_snap = [p.value.data.copy() for p in params]
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if cfg.patience > 0 and since_best >= cfg.patience:
                break

    for p, arr in zip(params, best_snap):
        p.value.data[:] = arr
    _, report.accuracy = holdout_eval()
    return PretrainResult(encoder, classifier, report)
