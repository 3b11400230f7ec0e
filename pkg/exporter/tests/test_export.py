import json

import numpy as np
import pytest

from vecexport.cli import main
from vecexport.encoders import DebugEncoder, EncoderLoadError, resolve_encoder
from vecexport.export import ExportConfig, collect_documents, export_corpus


def write_corpus(tmp_path, n_doctors=4, dialogues_per_doctor=2):
    doctors = tmp_path / "doctors.jsonl"
    dialogues = tmp_path / "dialogues.jsonl"
    with doctors.open("w") as fh:
        for i in range(n_doctors):
            fh.write(json.dumps({"doctor_id": f"d{i}", "department": f"dept{i % 2}",
                                 "profile": f"expert in area{i} and treatment{i}"}) + "\n")
    with dialogues.open("w") as fh:
        for i in range(n_doctors):
            for j in range(dialogues_per_doctor):
                fh.write(json.dumps({
                    "dialogue_id": f"d{i}-g{j}", "doctor_id": f"d{i}",
                    "turns": [{"role": "patient", "text": f"symptom{i} ache{j}"},
                              {"role": "doctor", "text": f"advice{i} remedy{j}"}],
                }) + "\n")
    return doctors, dialogues


def test_debug_encoder_is_deterministic():
    enc = DebugEncoder(dim=16)
    a = enc.encode_batch(["fever and chills", "rash"])
    b = DebugEncoder(dim=16).encode_batch(["fever and chills", "rash"])
    assert np.array_equal(a, b)
    assert a.shape == (2, 16)
    assert np.all(np.isfinite(a))
    assert np.any(a != 0.0)


def test_resolve_encoder_validates_pooling():
    with pytest.raises(ValueError, match="pooling"):
        resolve_encoder("debug:8", "max", 512)


def test_resolve_encoder_rejects_missing_model():
    with pytest.raises(EncoderLoadError):
        resolve_encoder("debug:1", "mean", 512)


def test_collect_documents_counts_and_ids(tmp_path):
    doctors, dialogues = write_corpus(tmp_path, n_doctors=3, dialogues_per_doctor=2)
    cfg = ExportConfig(model="debug:8")
    docs = collect_documents(doctors, dialogues, cfg)
    ids = [d for d, _ in docs]
    assert len(docs) == 3 + 6 + 6  # profiles + dialogues + queries
    assert "profile:d0" in ids and "dialogue:d2-g1" in ids and "query:d1-g0" in ids
    # queries carry only the first patient turn
    query_text = dict(docs)["query:d0-g0"]
    assert query_text == "symptom0 ache0"
    dialogue_text = dict(docs)["dialogue:d0-g0"]
    assert dialogue_text == "symptom0 ache0 advice0 remedy0"


def test_collect_documents_rejects_collisions(tmp_path):
    doctors = tmp_path / "doctors.jsonl"
    doctors.write_text(json.dumps({"doctor_id": "a", "department": "x",
                                   "profile": "p"}) + "\n"
                       + json.dumps({"doctor_id": "a", "department": "y",
                                     "profile": "q"}) + "\n")
    dialogues = tmp_path / "dialogues.jsonl"
    dialogues.write_text("")
    with pytest.raises(ValueError, match="collision"):
        collect_documents(doctors, dialogues, ExportConfig(model="debug:8"))


def test_export_writes_header_and_vectors(tmp_path):
    doctors, dialogues = write_corpus(tmp_path, n_doctors=2, dialogues_per_doctor=2)
    out = tmp_path / "vectors.jsonl"
    count = export_corpus(doctors, dialogues, out,
                          ExportConfig(model="debug:12", batch_size=3))
    lines = out.read_text().strip().splitlines()
    assert json.loads(lines[0]) == {"dim": 12}
    assert count == 2 + 4 + 4
    assert len(lines) == 1 + count
    for line in lines[1:]:
        rec = json.loads(line)
        assert len(rec["vec"]) == 12
        assert all(np.isfinite(rec["vec"]))
        assert any(x != 0.0 for x in rec["vec"])  # non-empty docs embed non-zero


def test_export_is_bitwise_stable(tmp_path):
    doctors, dialogues = write_corpus(tmp_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    cfg = ExportConfig(model="debug:8")
    export_corpus(doctors, dialogues, a, cfg)
    export_corpus(doctors, dialogues, b, cfg)
    assert a.read_bytes() == b.read_bytes()


def test_cli_roundtrip(tmp_path, capsys):
    doctors, dialogues = write_corpus(tmp_path)
    out = tmp_path / "vectors.jsonl"
    rc = main(["--doctors", str(doctors), "--dialogues", str(dialogues),
               "--model", "debug:8", "--pooling", "mean", "--out", str(out)])
    assert rc == 0
    assert "wrote" in capsys.readouterr().out
    assert out.is_file()


def test_cli_reports_encoder_failure(tmp_path, capsys):
    doctors, dialogues = write_corpus(tmp_path)
    rc = main(["--doctors", str(doctors), "--dialogues", str(dialogues),
               "--model", "debug:0", "--out", str(tmp_path / "v.jsonl")])
    assert rc == 2
    assert "encoder error" in capsys.readouterr().err


def test_include_subsets(tmp_path):
    doctors, dialogues = write_corpus(tmp_path, n_doctors=2, dialogues_per_doctor=1)
    out = tmp_path / "profiles_only.jsonl"
    count = export_corpus(doctors, dialogues, out,
                          ExportConfig(model="debug:8", include=("profiles",)))
    assert count == 2


def test_hf_backend_skipped_without_local_model():
    pytest.importorskip("transformers")
    try:
        encoder = resolve_encoder("sentence-transformers/all-MiniLM-L6-v2",
                                  "mean", 128)
    except EncoderLoadError:
        pytest.skip("no local copy of the pretrained encoder")
    vecs = encoder.encode_batch(["fever and chills"])
    assert vecs.shape == (1, encoder.dim)
