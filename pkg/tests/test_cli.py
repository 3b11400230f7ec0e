import json
import threading
import urllib.error
import urllib.request

import pytest

from expertmatch.cli import main, parse_config_file


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthcorpus")
    rc = main(["gen-synth", "--n-topics", "3", "--n-doctors", "9",
               "--dialogues-per-doctor", "10", "--turns-per-dialogue", "3",
               "--tokens-per-turn", "8", "--vocab-per-topic", "12",
               "--shared-noise-vocab", "6", "--noise-fraction", "0.2",
               "--expertise-concentration", "0.9", "--doctor-token-bias", "0.6",
               "--seed", "13", "--out", str(out)])
    assert rc == 0
    return out


def corpus_flags(synth_dir):
    return ["--doctors", str(synth_dir / "doctors.jsonl"),
            "--dialogues", str(synth_dir / "dialogues.jsonl")]


@pytest.fixture(scope="module")
def split_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    rc = main(["split", *corpus_flags(synth_dir), "--seed", "5", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(synth_dir, split_dir, tmp_path_factory):
    pre = tmp_path_factory.mktemp("pretrain")
    rc = main(["pretrain", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--dim", "16", "--hash-buckets", "512", "--seed", "3",
               "--out", str(pre)])
    assert rc == 0
    out = tmp_path_factory.mktemp("model")
    rc = main(["train", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--dim", "16", "--hash-buckets", "512", "--heads", "2",
               "--mlp-hidden", "32", "--neg-ratio", "3", "--batch", "64",
               "--max-epochs", "3", "--patience", "0", "--seed", "3",
               "--pool-size", "9",
               "--encoder-checkpoint", str(pre / "encoder.ckpt"),
               "--out", str(out)])
    assert rc == 0
    return out


def test_parse_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nheads = 4\nlr = 0.01\nencoder_mode = \"full\"\n"
                   "patience=2  # trailing\n")
    values = parse_config_file(cfg)
    assert values == {"heads": 4, "lr": 0.01, "encoder_mode": "full", "patience": 2}


def test_parse_config_rejects_garbage(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this is not a config\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_file(cfg)


def test_gen_synth_writes_manifest_and_ground_truth(synth_dir):
    assert (synth_dir / "doctors.jsonl").is_file()
    assert (synth_dir / "dialogues.jsonl").is_file()
    truth = json.loads((synth_dir / "ground_truth.json").read_text())
    assert set(truth) == {"doctors", "dialogues", "topic_vocab"}
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-synth"
    assert manifest["config"]["n_doctors"] == 9


def test_ingest_reports_counts(synth_dir, capsys):
    rc = main(["ingest", *corpus_flags(synth_dir)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"doctors": 9, "dialogues": 90, "departments": 3}


def test_ingest_bad_file_has_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{nope\n")
    rc = main(["ingest", "--doctors", str(bad), "--dialogues", str(bad)])
    assert rc == 3
    assert "corpus error" in capsys.readouterr().err


def test_missing_file_is_categorized(tmp_path, capsys):
    rc = main(["ingest", "--doctors", str(tmp_path / "none.jsonl"),
               "--dialogues", str(tmp_path / "none.jsonl")])
    assert rc == 4
    assert "file error" in capsys.readouterr().err


def test_stats_outputs_json(synth_dir, capsys):
    rc = main(["stats", *corpus_flags(synth_dir)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["doctor_count"] == 9
    assert report["dialogue_count"] == 90


def test_split_manifest_and_determinism(synth_dir, split_dir, tmp_path):
    data = json.loads((split_dir / "split.json").read_text())
    assert data["seed"] == 5
    rc = main(["split", *corpus_flags(synth_dir), "--seed", "5",
               "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "split.json").read_bytes() == \
        (split_dir / "split.json").read_bytes()


def test_pretrain_and_train_artifacts(trained_dir):
    assert (trained_dir / "model.ckpt").is_file()
    meta = json.loads((trained_dir / "model.json").read_text())
    assert meta["model"]["heads"] == 2
    assert meta["encoder"]["type"] == "hash"
    history = json.loads((trained_dir / "history.json").read_text())
    assert history["epochs_run"] == 3
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert len(manifest["inputs"]) == 2


def test_eval_checkpoint(synth_dir, split_dir, trained_dir, tmp_path, capsys):
    rc = main(["eval", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--checkpoint", str(trained_dir), "--on", "test",
               "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert 0.0 <= report["overall"]["p_at_1"] <= 1.0
    assert "P@1" in capsys.readouterr().out


def test_eval_bucketed_by_department(synth_dir, split_dir, trained_dir, capsys):
    rc = main(["eval", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--checkpoint", str(trained_dir), "--on", "test",
               "--bucket", "department"])
    assert rc == 0
    assert "dept" in capsys.readouterr().out


def test_eval_reports_are_byte_identical(synth_dir, split_dir, trained_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = main(["eval", *corpus_flags(synth_dir),
                   "--split", str(split_dir / "split.json"),
                   "--checkpoint", str(trained_dir), "--on", "test",
                   "--out", str(out)])
        assert rc == 0
    assert (a / "eval.json").read_bytes() == (b / "eval.json").read_bytes()


@pytest.mark.parametrize("kind", ["random", "frequency", "knn", "cos_profile",
                                  "cos_dialogue"])
def test_baseline_kinds_run(synth_dir, split_dir, kind, capsys):
    rc = main(["baseline", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--kind", kind, "--dim", "16", "--hash-buckets", "512",
               "--pool-size", "9", "--seed", "1"])
    assert rc == 0
    assert "P@1" in capsys.readouterr().out


def test_baseline_mlp_variant_trains(synth_dir, split_dir, capsys):
    rc = main(["baseline", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--kind", "mlp_p", "--dim", "16", "--hash-buckets", "512",
               "--mlp-hidden", "16", "--neg-ratio", "2", "--batch", "64",
               "--max-epochs", "2", "--patience", "0",
               "--pool-size", "9", "--seed", "1"])
    assert rc == 0
    assert "mlp_p" in capsys.readouterr().out


def test_eval_seed_averaging(synth_dir, split_dir, capsys):
    rc = main(["eval", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--dim", "16", "--hash-buckets", "512", "--heads", "2",
               "--mlp-hidden", "16", "--neg-ratio", "2", "--batch", "64",
               "--max-epochs", "2", "--patience", "0", "--pool-size", "9",
               "--no-selflearn", "--seeds", "3,4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "averaged over seeds [3, 4]" in out
    assert "P@1" in out


def test_recommend_prints_descending_scores(synth_dir, split_dir, trained_dir, capsys):
    rc = main(["recommend", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--checkpoint", str(trained_dir),
               "--query", "t0_1 t0_2 t0_3 noise_1", "--top", "5"])
    assert rc == 0
    lines = [l for l in capsys.readouterr().out.strip().splitlines() if l]
    assert len(lines) == 5
    scores = [float(line.split("\t")[1]) for line in lines]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_explain_outputs_heads(synth_dir, split_dir, trained_dir, capsys):
    corpus_doctor = "doc00"
    rc = main(["explain", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--checkpoint", str(trained_dir),
               "--doctor", corpus_doctor, "--top-k", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    payload = json.loads(out[:out.index("\nhead ")])
    assert len(payload["heads"]) == 2
    for head in payload["heads"]:
        assert len(head["top_tokens"]) <= 5


def test_grad_check_command(capsys):
    rc = main(["grad-check", "--dim", "8", "--heads", "2", "--mlp-hidden", "4",
               "--pool", "3"])
    assert rc == 0
    assert "PASS" in capsys.readouterr().out


def test_sweep_heads_runs_two_counts(synth_dir, split_dir, tmp_path, capsys):
    rc = main(["sweep-heads", *corpus_flags(synth_dir),
               "--split", str(split_dir / "split.json"),
               "--dim", "16", "--hash-buckets", "512",
               "--mlp-hidden", "16", "--neg-ratio", "2", "--batch", "64",
               "--max-epochs", "2", "--patience", "0", "--seed", "2",
               "--pool-size", "9", "--no-selflearn",
               "--heads-list", "2,4", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert (tmp_path / "heads_2" / "eval.json").is_file()
    assert (tmp_path / "heads_4" / "eval.json").is_file()
    assert "heads" in out


# -- HTTP service ----------------------------------------------------------------


@pytest.fixture(scope="module")
def http_service(synth_dir, split_dir, trained_dir):
    import expertmatch.cli as cli
    from expertmatch.corpus import load_corpus, split_from_json
    from expertmatch.serve import RankingService, make_server

    corpus = load_corpus(synth_dir / "doctors.jsonl", synth_dir / "dialogues.jsonl")
    split = split_from_json(json.loads((split_dir / "split.json").read_text()))
    model = cli.load_bundle(trained_dir, corpus, split)
    service = RankingService(model, model_id="test-model")
    server = make_server(service, host="127.0.0.1", port=0)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{port}"
    server.shutdown()


def _post(url, payload):
    req = urllib.request.Request(url + "/recommend",
                                 data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"},
                                 method="POST")
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


def test_health_endpoint(http_service):
    with urllib.request.urlopen(http_service + "/health") as resp:
        assert resp.status == 200
        body = json.loads(resp.read())
    assert body == {"status": "ok", "model_id": "test-model"}


def test_recommend_endpoint(http_service):
    status, body = _post(http_service, {"query": "t1_0 t1_2 t1_4", "top_k": 3})
    assert status == 200
    assert body["model_id"] == "test-model"
    assert len(body["results"]) == 3
    for entry in body["results"]:
        assert set(entry) == {"doctor_id", "score", "department"}
    scores = [r["score"] for r in body["results"]]
    assert scores == sorted(scores, reverse=True)


def test_recommend_rejects_bad_requests(http_service):
    status, body = _post(http_service, {"query": "x", "top_k": 0})
    assert status == 400
    status, _ = _post(http_service, {"top_k": 3})
    assert status == 400
    status, _ = _post(http_service, {"query": "   ", "top_k": 3})
    assert status == 422


def test_concurrent_requests_agree(http_service):
    results = [None] * 8

    def hit(i):
        results[i] = _post(http_service, {"query": "t2_1 t2_3", "top_k": 4})

    threads = [threading.Thread(target=hit, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == results[0] for r in results)


def test_unready_service_returns_503():
    from expertmatch.serve import RankingService, make_server
    service = RankingService(model=None)
    server = make_server(service, host="127.0.0.1", port=0)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        try:
            urllib.request.urlopen(f"http://127.0.0.1:{port}/health")
            assert False, "expected 503"
        except urllib.error.HTTPError as err:
            assert err.code == 503
    finally:
        server.shutdown()
