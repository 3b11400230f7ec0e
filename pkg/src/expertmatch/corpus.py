"""Forum corpus data model: loading, validation, tokenization, splitting, and
summary statistics.

On-disk format is JSONL: a doctors file with one
``{"doctor_id", "department", "profile"}`` object per line and a dialogues
file with one ``{"dialogue_id", "doctor_id", "turns": [{"role", "text"}]}``
object per line, both UTF-8.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .tensor import SplitMix64

ROLE_PATIENT = "patient"
ROLE_DOCTOR = "doctor"

# mirrors the usual transformer input limit; applied when assembling documents
DOC_TOKEN_CAP = 512

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class CorpusError(ValueError):
    """Invalid corpus content; message carries file/line context when known."""


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in (ROLE_PATIENT, ROLE_DOCTOR):
            raise CorpusError(f"turn role must be patient or doctor, got {self.role!r}")
        if not self.text.strip():
            raise CorpusError("turn text is empty")


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    doctor_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise CorpusError(f"dialogue {self.dialogue_id!r} has no turns")
        if self.turns[0].role != ROLE_PATIENT:
            raise CorpusError(
                f"dialogue {self.dialogue_id!r} must start with a patient turn")

    @property
    def query_text(self) -> str:
        return self.turns[0].text


@dataclass
class Doctor:
    doctor_id: str
    department: str
    profile_text: str
    dialogue_ids: list[str] = field(default_factory=list)


class Corpus:
    """Cross-referenced doctors and dialogues, in file order."""

    def __init__(self, doctors: dict[str, Doctor], dialogues: dict[str, Dialogue]):
        self.doctors = doctors
        self.dialogues = dialogues

    def dialogues_of(self, doctor_id: str) -> list[Dialogue]:
        return [self.dialogues[d] for d in self.doctors[doctor_id].dialogue_ids]

    @property
    def departments(self) -> list[str]:
        return sorted({d.department for d in self.doctors.values()})


def load_corpus(doctors_path, dialogues_path) -> Corpus:
    doctors: dict[str, Doctor] = {}
    with open(doctors_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Doctor(doctor_id=str(rec["doctor_id"]),
                             department=str(rec["department"]),
                             profile_text=str(rec["profile"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{doctors_path}:{lineno}: malformed doctor record: {exc}") from exc
            if doc.doctor_id in doctors:
                raise CorpusError(f"{doctors_path}:{lineno}: duplicate doctor_id {doc.doctor_id!r}")
            doctors[doc.doctor_id] = doc

    dialogues: dict[str, Dialogue] = {}
    with open(dialogues_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                turns = tuple(Turn(role=str(t["role"]), text=str(t["text"]))
                              for t in rec["turns"])
                dlg = Dialogue(dialogue_id=str(rec["dialogue_id"]),
                               doctor_id=str(rec["doctor_id"]), turns=turns)
            except CorpusError as exc:
                raise CorpusError(f"{dialogues_path}:{lineno}: {exc}") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{dialogues_path}:{lineno}: malformed dialogue record: {exc}") from exc
            if dlg.dialogue_id in dialogues:
                raise CorpusError(f"{dialogues_path}:{lineno}: duplicate dialogue_id {dlg.dialogue_id!r}")
            if dlg.doctor_id not in doctors:
                raise CorpusError(
                    f"{dialogues_path}:{lineno}: dialogue {dlg.dialogue_id!r} references "
                    f"unknown doctor {dlg.doctor_id!r}")
            dialogues[dlg.dialogue_id] = dlg
            doctors[dlg.doctor_id].dialogue_ids.append(dlg.dialogue_id)
    return Corpus(doctors, dialogues)


def save_corpus(corpus: Corpus, doctors_path, dialogues_path) -> None:
    with open(doctors_path, "w", encoding="utf-8") as fh:
        for doc in corpus.doctors.values():
            fh.write(json.dumps({"doctor_id": doc.doctor_id,
                                 "department": doc.department,
                                 "profile": doc.profile_text}, ensure_ascii=False) + "\n")
    with open(dialogues_path, "w", encoding="utf-8") as fh:
        for dlg in corpus.dialogues.values():
            fh.write(json.dumps({
                "dialogue_id": dlg.dialogue_id,
                "doctor_id": dlg.doctor_id,
                "turns": [{"role": t.role, "text": t.text} for t in dlg.turns],
            }, ensure_ascii=False) + "\n")


def tokenize(text: str, stoplist: Iterable[str] = frozenset(),
             keep_stopwords: bool = False) -> list[str]:
    """Case-folded tokens split on Unicode whitespace and punctuation.

    Stoplist members are dropped unless ``keep_stopwords`` is set; queries and
    profiles keep their stopwords, other dialogue turns do not.
    """
    tokens = _TOKEN_RE.findall(unicodedata.normalize("NFKC", text).casefold())
    if keep_stopwords:
        return tokens
    stop = stoplist if isinstance(stoplist, (set, frozenset)) else frozenset(stoplist)
    return [t for t in tokens if t not in stop]


def load_termlist(path) -> frozenset[str]:
    """One term per line; blank lines ignored; terms case-folded."""
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.strip().casefold() for line in fh if line.strip())


# -- dataset split ---------------------------------------------------------------

SPLIT_VAL = "val"
SPLIT_TEST = "test"


@dataclass(frozen=True)
class Query:
    query_id: str
    tokens: tuple[str, ...]
    gold_doctor_id: str
    source_dialogue_id: str
    split: str


@dataclass(frozen=True)
class SplitSpec:
    train_dialogues: frozenset[str]
    queries: tuple[Query, ...]
    seed: int

    def queries_of(self, split: str) -> list[Query]:
        return [q for q in self.queries if q.split == split]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(corpus: Corpus, seed: int) -> SplitSpec:
    """Per doctor, a seeded shuffle keeps 80% of dialogues for training; the
    held-out dialogues' first turns become queries, halved into val/test."""
    rng = SplitMix64(seed)
    train: list[str] = []
    held: list[Dialogue] = []
    for doctor_id in sorted(corpus.doctors):
        ids = list(corpus.doctors[doctor_id].dialogue_ids)
        rng.shuffle(ids)
        k = _round_half_up(0.8 * len(ids))
        train.extend(ids[:k])
        held.extend(corpus.dialogues[d] for d in ids[k:])

    queries = [
        Query(query_id=f"q-{dlg.dialogue_id}",
              tokens=tuple(tokenize(dlg.query_text, keep_stopwords=True)[:DOC_TOKEN_CAP]),
              gold_doctor_id=dlg.doctor_id,
              source_dialogue_id=dlg.dialogue_id,
              split=SPLIT_VAL)
        for dlg in held
    ]
    rng.shuffle(queries)
    n_val = (len(queries) + 1) // 2  # odd count: validation takes the extra one
    queries = [
        Query(q.query_id, q.tokens, q.gold_doctor_id, q.source_dialogue_id,
              SPLIT_VAL if i < n_val else SPLIT_TEST)
        for i, q in enumerate(queries)
    ]
    return SplitSpec(train_dialogues=frozenset(train), queries=tuple(queries), seed=seed)


def split_to_json(split: SplitSpec) -> dict:
    return {
        "seed": split.seed,
        "train_dialogues": sorted(split.train_dialogues),
        "queries": [{
            "query_id": q.query_id,
            "tokens": list(q.tokens),
            "gold_doctor_id": q.gold_doctor_id,
            "source_dialogue_id": q.source_dialogue_id,
            "split": q.split,
        } for q in split.queries],
    }


def split_from_json(obj: dict) -> SplitSpec:
    return SplitSpec(
        train_dialogues=frozenset(obj["train_dialogues"]),
        queries=tuple(Query(q["query_id"], tuple(q["tokens"]), q["gold_doctor_id"],
                            q["source_dialogue_id"], q["split"])
                      for q in obj["queries"]),
        seed=int(obj["seed"]),
    )


# -- statistics -------------------------------------------------------------------

DIALOGUES_PER_DOCTOR_EDGES = (1, 50, 100, 200, 400, 800)
DIALOGUE_LENGTH_EDGES = (1, 100, 200, 400, 800, 1600)


def _histogram(values: Sequence[int], edges: Sequence[int]) -> dict[str, int]:
    labels = []
    for i, lo in enumerate(edges):
        hi = edges[i + 1] - 1 if i + 1 < len(edges) else None
        labels.append(f"{lo}-{hi}" if hi is not None else f"{lo}+")
    counts = {label: 0 for label in labels}
    for v in values:
        for i in range(len(edges) - 1, -1, -1):
            if v >= edges[i]:
                counts[labels[i]] += 1
                break
        else:
            counts[labels[0]] += 1
    return counts


@dataclass(frozen=True)
class StatsReport:
    dialogue_count: int
    doctor_count: int
    department_count: int
    avg_tokens_query: float
    avg_tokens_dialogue: float
    avg_tokens_profile: float
    dialogues_per_doctor_histogram: dict[str, int]
    dialogue_length_histogram: dict[str, int]
    medical_term_fraction_profile: float
    medical_term_fraction_patient_turns: float
    medical_term_fraction_doctor_turns: float

    def to_json(self) -> dict:
        return {
            "dialogue_count": self.dialogue_count,
            "doctor_count": self.doctor_count,
            "department_count": self.department_count,
            "avg_tokens_query": self.avg_tokens_query,
            "avg_tokens_dialogue": self.avg_tokens_dialogue,
            "avg_tokens_profile": self.avg_tokens_profile,
            "dialogues_per_doctor_histogram": self.dialogues_per_doctor_histogram,
            "dialogue_length_histogram": self.dialogue_length_histogram,
            "medical_term_fraction_profile": self.medical_term_fraction_profile,
            "medical_term_fraction_patient_turns": self.medical_term_fraction_patient_turns,
            "medical_term_fraction_doctor_turns": self.medical_term_fraction_doctor_turns,
        }


def _term_fraction(tokens: list[str], lexicon: frozenset[str]) -> float:
    if not tokens or not lexicon:
        return 0.0
    return sum(1 for t in tokens if t in lexicon) / len(tokens)


def corpus_stats(corpus: Corpus, medical_lexicon: Iterable[str] = frozenset()) -> StatsReport:
    """Token averages use keep_stopwords=True so counts reflect the raw text."""
    lexicon = frozenset(t.casefold() for t in medical_lexicon)
    query_lens, dialogue_lens = [], []
    patient_tokens: list[str] = []
    doctor_tokens: list[str] = []
    for dlg in corpus.dialogues.values():
        turn_tokens = [tokenize(t.text, keep_stopwords=True) for t in dlg.turns]
        query_lens.append(len(turn_tokens[0]))
        dialogue_lens.append(sum(len(tt) for tt in turn_tokens))
        for turn, tt in zip(dlg.turns, turn_tokens):
            (patient_tokens if turn.role == ROLE_PATIENT else doctor_tokens).extend(tt)

    profile_tokens: list[str] = []
    profile_lens = []
    for doc in corpus.doctors.values():
        tt = tokenize(doc.profile_text, keep_stopwords=True)
        profile_lens.append(len(tt))
        profile_tokens.extend(tt)

    def avg(xs):
        return sum(xs) / len(xs) if xs else 0.0

    per_doctor = [len(d.dialogue_ids) for d in corpus.doctors.values()]
    return StatsReport(
        dialogue_count=len(corpus.dialogues),
        doctor_count=len(corpus.doctors),
        department_count=len(corpus.departments),
        avg_tokens_query=avg(query_lens),
        avg_tokens_dialogue=avg(dialogue_lens),
        avg_tokens_profile=avg(profile_lens),
        dialogues_per_doctor_histogram=_histogram(per_doctor, DIALOGUES_PER_DOCTOR_EDGES),
        dialogue_length_histogram=_histogram(dialogue_lens, DIALOGUE_LENGTH_EDGES),
        medical_term_fraction_profile=_term_fraction(profile_tokens, lexicon),
        medical_term_fraction_patient_turns=_term_fraction(patient_tokens, lexicon),
        medical_term_fraction_doctor_turns=_term_fraction(doctor_tokens, lexicon),
    )


def candidate_pool(corpus: Corpus, split: SplitSpec, size: int = 100) -> list[str]:
    """Doctors by descending training-dialogue count, ties by ascending id."""
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    counts = {doc_id: 0 for doc_id in corpus.doctors}
    for did in split.train_dialogues:
        counts[corpus.dialogues[did].doctor_id] += 1
    ordered = sorted(counts, key=lambda d: (-counts[d], d))
    return ordered[:size]


def training_counts(corpus: Corpus, split: SplitSpec) -> dict[str, int]:
    counts = {doc_id: 0 for doc_id in corpus.doctors}
    for did in split.train_dialogues:
        counts[corpus.dialogues[did].doctor_id] += 1
    return counts


# -- document assembly -------------------------------------------------------------


def profile_doc_id(doctor_id: str) -> str:
    return f"profile:{doctor_id}"


def dialogue_doc_id(dialogue_id: str) -> str:
    return f"dialogue:{dialogue_id}"


def query_doc_id(dialogue_id: str) -> str:
    return f"query:{dialogue_id}"


class DocumentSet:
    """Tokenized documents for every profile, dialogue, and first-turn query."""

    def __init__(self, tokens_by_id: dict[str, list[str]]):
        self.tokens_by_id = tokens_by_id

    def __getitem__(self, doc_id: str) -> list[str]:
        return self.tokens_by_id[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.tokens_by_id

    def length(self, doc_id: str) -> int:
        return len(self.tokens_by_id[doc_id])


def dialogue_tokens(dialogue: Dialogue, stoplist: Iterable[str] = frozenset(),
                    cap: int = DOC_TOKEN_CAP) -> list[str]:
    """Turns joined in order; the opening query keeps stopwords, later turns drop them."""
    tokens: list[str] = []
    for i, turn in enumerate(dialogue.turns):
        tokens.extend(tokenize(turn.text, stoplist, keep_stopwords=(i == 0)))
        if len(tokens) >= cap:
            break
    return tokens[:cap]


def build_documents(corpus: Corpus, stoplist: Iterable[str] = frozenset(),
                    cap: int = DOC_TOKEN_CAP) -> DocumentSet:
    stop = frozenset(stoplist)
    docs: dict[str, list[str]] = {}
    for doc in corpus.doctors.values():
        docs[profile_doc_id(doc.doctor_id)] = tokenize(
            doc.profile_text, keep_stopwords=True)[:cap]
    for dlg in corpus.dialogues.values():
        docs[dialogue_doc_id(dlg.dialogue_id)] = dialogue_tokens(dlg, stop, cap)
        docs[query_doc_id(dlg.dialogue_id)] = tokenize(
            dlg.query_text, keep_stopwords=True)[:cap]
    return DocumentSet(docs)
