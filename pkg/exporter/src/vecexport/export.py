"""Read the corpus JSONL files, encode every document, and write the vector
file the ranking engine loads.

Document ids follow the engine's scheme:

* ``profile:<doctor_id>``   the doctor's profile text
* ``dialogue:<dialogue_id>`` all turns joined in chronological order
* ``query:<dialogue_id>``    the dialogue's opening patient turn
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoders import resolve_encoder


@dataclass(frozen=True)
class ExportConfig:
    model: str
    pooling: str = "mean"
    max_tokens: int = 512
    batch_size: int = 32
    include: tuple[str, ...] = ("profiles", "dialogues", "queries")

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        unknown = set(self.include) - {"profiles", "dialogues", "queries"}
        if unknown:
            raise ValueError(f"unknown include sections: {sorted(unknown)}")


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from exc


def collect_documents(doctors_path, dialogues_path, cfg: ExportConfig) -> list[tuple[str, str]]:
    """(doc_id, text) pairs in file order; rejects id collisions."""
    docs: list[tuple[str, str]] = []
    seen: set[str] = set()

    def add(doc_id: str, text: str, where: str):
        if doc_id in seen:
            raise ValueError(f"{where}: document id collision on {doc_id!r}")
        seen.add(doc_id)
        docs.append((doc_id, text))

    if "profiles" in cfg.include:
        for lineno, rec in _read_jsonl(doctors_path):
            add(f"profile:{rec['doctor_id']}", str(rec["profile"]),
                f"{doctors_path}:{lineno}")
    if "dialogues" in cfg.include or "queries" in cfg.include:
        for lineno, rec in _read_jsonl(dialogues_path):
            turns = rec["turns"]
            if not turns:
                raise ValueError(f"{dialogues_path}:{lineno}: dialogue "
                                 f"{rec['dialogue_id']!r} has no turns")
            if "dialogues" in cfg.include:
                joined = " ".join(str(t["text"]) for t in turns)
                add(f"dialogue:{rec['dialogue_id']}", joined,
                    f"{dialogues_path}:{lineno}")
            if "queries" in cfg.include:
                add(f"query:{rec['dialogue_id']}", str(turns[0]["text"]),
                    f"{dialogues_path}:{lineno}")
    return docs


def export_corpus(doctors_path, dialogues_path, out_path, cfg: ExportConfig) -> int:
    """Encode everything and write the vector file; returns the document count."""
    encoder = resolve_encoder(cfg.model, cfg.pooling, cfg.max_tokens)
    docs = collect_documents(doctors_path, dialogues_path, cfg)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": encoder.dim}) + "\n")
        for start in range(0, len(docs), cfg.batch_size):
            chunk = docs[start:start + cfg.batch_size]
            vectors = encoder.encode_batch([text for _, text in chunk])
            if not np.all(np.isfinite(vectors)):
                raise ValueError("encoder produced non-finite vectors")
            for (doc_id, _), vec in zip(chunk, vectors):
                fh.write(json.dumps({"id": doc_id,
                                     "vec": [float(x) for x in vec]}) + "\n")
    return len(docs)
