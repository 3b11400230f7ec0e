import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertmatch.corpus import (CorpusError, Dialogue, Doctor, Turn,
                                build_documents, candidate_pool, corpus_stats,
                                dialogue_doc_id, load_corpus, profile_doc_id,
                                query_doc_id, save_corpus, split_dataset,
                                split_from_json, split_to_json, tokenize,
                                training_counts)
from expertmatch.corpus import Corpus


def write_corpus(tmp_path, doctors, dialogues):
    dpath = tmp_path / "doctors.jsonl"
    gpath = tmp_path / "dialogues.jsonl"
    dpath.write_text("\n".join(json.dumps(d) for d in doctors) + "\n")
    gpath.write_text("\n".join(json.dumps(d) for d in dialogues) + "\n")
    return dpath, gpath


def sample_files(tmp_path):
    doctors = [
        {"doctor_id": "d1", "department": "neuro", "profile": "nerve pain expert"},
        {"doctor_id": "d2", "department": "derm", "profile": "skin specialist"},
    ]
    dialogues = [
        {"dialogue_id": "g1", "doctor_id": "d1",
         "turns": [{"role": "patient", "text": "my head hurts"},
                   {"role": "doctor", "text": "since when"}]},
        {"dialogue_id": "g2", "doctor_id": "d1",
         "turns": [{"role": "patient", "text": "dizzy spells"}]},
        {"dialogue_id": "g3", "doctor_id": "d2",
         "turns": [{"role": "patient", "text": "itchy rash on arm"}]},
    ]
    return write_corpus(tmp_path, doctors, dialogues)


def test_load_corpus_cross_references(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    assert len(corpus.doctors) == 2
    assert len(corpus.dialogues) == 3
    assert corpus.doctors["d1"].dialogue_ids == ["g1", "g2"]
    assert corpus.dialogues["g1"].query_text == "my head hurts"


def test_load_corpus_dangling_doctor_reference(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x", "profile": "p"}]
    dialogues = [{"dialogue_id": "g1", "doctor_id": "d99",
                  "turns": [{"role": "patient", "text": "hi"}]}]
    with pytest.raises(CorpusError, match="d99"):
        load_corpus(*write_corpus(tmp_path, doctors, dialogues))


def test_load_corpus_reports_line_numbers(tmp_path):
    dpath = tmp_path / "doctors.jsonl"
    dpath.write_text('{"doctor_id": "d1", "department": "x", "profile": "p"}\n'
                     "{broken\n")
    gpath = tmp_path / "dialogues.jsonl"
    gpath.write_text("")
    with pytest.raises(CorpusError, match=":2"):
        load_corpus(dpath, gpath)


def test_load_corpus_duplicate_ids(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x", "profile": "p"},
               {"doctor_id": "d1", "department": "y", "profile": "q"}]
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(*write_corpus(tmp_path, doctors, []))


def test_load_corpus_rejects_bad_first_turn(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x", "profile": "p"}]
    dialogues = [{"dialogue_id": "g1", "doctor_id": "d1",
                  "turns": [{"role": "doctor", "text": "hello"}]}]
    with pytest.raises(CorpusError, match="patient"):
        load_corpus(*write_corpus(tmp_path, doctors, dialogues))


def test_load_corpus_rejects_empty_turns(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x", "profile": "p"}]
    dialogues = [{"dialogue_id": "g1", "doctor_id": "d1", "turns": []}]
    with pytest.raises(CorpusError):
        load_corpus(*write_corpus(tmp_path, doctors, dialogues))


def test_save_load_roundtrip(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    d2, g2 = tmp_path / "d2.jsonl", tmp_path / "g2.jsonl"
    save_corpus(corpus, d2, g2)
    again = load_corpus(d2, g2)
    assert set(again.doctors) == set(corpus.doctors)
    assert set(again.dialogues) == set(corpus.dialogues)
    for did, dlg in corpus.dialogues.items():
        assert again.dialogues[did].turns == dlg.turns


def test_tokenize_stopword_handling():
    assert tokenize("Headache and nausea", {"and"}) == ["headache", "nausea"]
    assert tokenize("Headache and nausea", {"and"}, keep_stopwords=True) == \
        ["headache", "and", "nausea"]
    assert tokenize("", set()) == []


def test_tokenize_casefolds_and_splits_punctuation():
    assert tokenize("Fever, CHILLS; ache!") == ["fever", "chills", "ache"]
    assert tokenize("t3_17 stays one token") == ["t3_17", "stays", "one", "token"]


@settings(max_examples=80, deadline=None)
@given(st.text(max_size=80))
def test_tokenize_idempotent_on_joined_output(text):
    once = tokenize(text, keep_stopwords=True)
    again = tokenize(" ".join(once), keep_stopwords=True)
    assert once == again


def make_synthetic_corpus(n_doctors, dialogues_per_doctor):
    doctors, dialogues = {}, {}
    for i in range(n_doctors):
        did = f"d{i:03d}"
        doctors[did] = Doctor(did, f"dept{i % 3}", f"profile text {i}")
        for j in range(dialogues_per_doctor):
            gid = f"{did}-g{j}"
            dialogues[gid] = Dialogue(gid, did, (Turn("patient", f"query {i} {j}"),
                                                 Turn("doctor", f"answer {j}")))
            doctors[did].dialogue_ids.append(gid)
    return Corpus(doctors, dialogues)


def test_split_dataset_80_20_per_doctor():
    corpus = make_synthetic_corpus(3, 10)
    split = split_dataset(corpus, seed=99)
    counts = training_counts(corpus, split)
    assert all(c == 8 for c in counts.values())
    assert len(split.queries) == 6
    val, test = split.queries_of("val"), split.queries_of("test")
    assert len(val) == 3 and len(test) == 3


def test_split_single_dialogue_doctor_contributes_no_queries():
    corpus = make_synthetic_corpus(1, 1)
    split = split_dataset(corpus, seed=5)
    assert len(split.train_dialogues) == 1
    assert split.queries == ()


def test_split_partitions_dialogues():
    corpus = make_synthetic_corpus(4, 7)
    split = split_dataset(corpus, seed=2)
    held = {q.source_dialogue_id for q in split.queries}
    assert split.train_dialogues | held == set(corpus.dialogues)
    assert split.train_dialogues & held == set()


def test_split_is_deterministic():
    corpus = make_synthetic_corpus(5, 9)
    assert split_dataset(corpus, seed=42) == split_dataset(corpus, seed=42)
    assert split_dataset(corpus, seed=42) != split_dataset(corpus, seed=43)


def test_split_odd_query_count_gives_val_the_extra():
    corpus = make_synthetic_corpus(1, 9)  # round(7.2)=7 train, 2 held... use 13
    corpus = make_synthetic_corpus(1, 13)  # round(10.4)=10 train, 3 held
    split = split_dataset(corpus, seed=1)
    assert len(split.queries) == 3
    assert len(split.queries_of("val")) == 2
    assert len(split.queries_of("test")) == 1


def test_split_json_roundtrip():
    corpus = make_synthetic_corpus(3, 6)
    split = split_dataset(corpus, seed=8)
    assert split_from_json(split_to_json(split)) == split


def test_split_queries_keep_stopwords():
    doctors = {"d1": Doctor("d1", "x", "p")}
    dlg = Dialogue("g1", "d1", (Turn("patient", "I have a headache and nausea"),))
    doctors["d1"].dialogue_ids.append("g1")
    corpus = Corpus(doctors, {"g1": dlg})
    # force g1 held out: with one dialogue round(0.8)=1 -> trains; use 5 dialogues
    for j in range(2, 6):
        gid = f"g{j}"
        corpus.dialogues[gid] = Dialogue(gid, "d1", (Turn("patient", f"text {j}"),))
        doctors["d1"].dialogue_ids.append(gid)
    split = split_dataset(corpus, seed=0)
    all_tokens = [tok for q in split.queries for tok in q.tokens]
    assert all_tokens  # queries tokenized with stopwords kept: "a"/"and" survive
    held = {q.source_dialogue_id for q in split.queries}
    if "g1" in held:
        q = next(q for q in split.queries if q.source_dialogue_id == "g1")
        assert "and" in q.tokens and "a" in q.tokens


def test_corpus_stats_fractions_and_counts(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    stats = corpus_stats(corpus, medical_lexicon={"nerve", "pain"})
    assert stats.dialogue_count == 3
    assert stats.doctor_count == 2
    assert stats.department_count == 2
    # d1 profile: nerve pain expert -> 2/3; d2: skin specialist -> 0/2
    assert stats.medical_term_fraction_profile == pytest.approx(2 / 5)
    assert 0.0 <= stats.medical_term_fraction_patient_turns <= 1.0
    assert sum(stats.dialogues_per_doctor_histogram.values()) == 2
    assert sum(stats.dialogue_length_histogram.values()) == 3


def test_corpus_stats_empty_lexicon_gives_zero_fractions(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    stats = corpus_stats(corpus)
    assert stats.medical_term_fraction_profile == 0.0
    assert stats.medical_term_fraction_patient_turns == 0.0
    assert stats.medical_term_fraction_doctor_turns == 0.0


def test_corpus_stats_avg_tokens(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    stats = corpus_stats(corpus)
    # queries: 3, 2, 4 tokens
    assert stats.avg_tokens_query == pytest.approx(3.0)
    # dialogues: 5, 2, 4 tokens
    assert stats.avg_tokens_dialogue == pytest.approx(11 / 3)


def test_candidate_pool_order_and_truncation():
    corpus = make_synthetic_corpus(3, 5)
    split = split_dataset(corpus, seed=1)
    counts = training_counts(corpus, split)
    assert all(c == 4 for c in counts.values())  # ties everywhere: id order
    pool = candidate_pool(corpus, split, size=2)
    assert pool == ["d000", "d001"]
    assert candidate_pool(corpus, split, size=100) == ["d000", "d001", "d002"]


def test_candidate_pool_sorts_by_count_then_id():
    corpus = make_synthetic_corpus(3, 5)
    split = split_dataset(corpus, seed=1)
    # drop two training dialogues from d000 to change counts
    kept = frozenset(d for d in split.train_dialogues
                     if not d.startswith("d000")) | \
        frozenset(list(sorted(d for d in split.train_dialogues
                              if d.startswith("d000")))[:2])
    split2 = type(split)(train_dialogues=kept, queries=split.queries, seed=split.seed)
    pool = candidate_pool(corpus, split2, size=3)
    assert pool == ["d001", "d002", "d000"]


def test_candidate_pool_large_corpus_truncates_to_100():
    corpus = make_synthetic_corpus(359, 2)
    split = split_dataset(corpus, seed=4)
    pool = candidate_pool(corpus, split, size=100)
    assert len(pool) == 100
    assert len(set(pool)) == 100


def test_build_documents_covers_all_ids(tmp_path):
    corpus = load_corpus(*sample_files(tmp_path))
    docs = build_documents(corpus)
    assert profile_doc_id("d1") in docs
    assert dialogue_doc_id("g1") in docs
    assert query_doc_id("g1") in docs
    assert docs[query_doc_id("g1")] == ["my", "head", "hurts"]


def test_dialogue_documents_drop_stopwords_after_first_turn(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x", "profile": "p"}]
    dialogues = [{"dialogue_id": "g1", "doctor_id": "d1",
                  "turns": [{"role": "patient", "text": "the headache"},
                            {"role": "doctor", "text": "the treatment"}]}]
    corpus = load_corpus(*write_corpus(tmp_path, doctors, dialogues))
    docs = build_documents(corpus, stoplist={"the"})
    # first (query) turn keeps "the", later turns drop it
    assert docs[dialogue_doc_id("g1")] == ["the", "headache", "treatment"]


def test_document_token_cap(tmp_path):
    doctors = [{"doctor_id": "d1", "department": "x",
                "profile": " ".join(f"w{i}" for i in range(600))}]
    dialogues = [{"dialogue_id": "g1", "doctor_id": "d1",
                  "turns": [{"role": "patient",
                             "text": " ".join(f"q{i}" for i in range(700))}]}]
    corpus = load_corpus(*write_corpus(tmp_path, doctors, dialogues))
    docs = build_documents(corpus)
    assert len(docs[profile_doc_id("d1")]) == 512
    assert len(docs[dialogue_doc_id("g1")]) == 512
    assert len(docs[query_doc_id("g1")]) == 512
