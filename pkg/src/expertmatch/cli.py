"""Operator command line: corpus tooling, the two training stages, evaluation,
baselines, diagnostics, and the HTTP service.

Configuration comes from an optional key=value file (ints, floats, booleans,
and strings; ``#`` comments) with command-line flags taking precedence. Every
artifact-producing run writes a manifest describing inputs, seeds, and outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import metrics as metrics_mod
from . import ranker, selflearn, synth
from .corpus import (Corpus, CorpusError, build_documents, candidate_pool,
                     corpus_stats, load_corpus, load_termlist, save_corpus,
                     split_dataset, split_from_json, split_to_json,
                     training_counts)
from .embed import EncoderConfig, HashEncoder, load_vectors
from .expertise import ATTENTION_MODES
from .ranker import ModelConfig, RecModel, TrainingDivergedError
from .serve import RankingService, serve_forever
from .tensor import grad_check, load_into, save_checkpoint

_CONFIG_KEYS_ENCODER = {"hash_buckets", "dim", "encoder_seed"}
_CONFIG_KEYS_MODEL = {"heads", "mlp_hidden", "lambda", "neg_ratio", "lr", "batch",
                      "max_epochs", "patience", "seed", "pool_size", "encoder_mode",
                      "max_dialogues"}
_CONFIG_KEYS_PRETRAIN = {"pretrain_neg_ratio", "pretrain_epochs", "pretrain_batch",
                         "pretrain_lr", "pretrain_patience", "pretrain_hidden"}


def parse_config_file(path) -> dict:
    """Flat key=value lines; ints, floats, true/false, quoted or bare strings."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if val.lower() in ("true", "false"):
            values[key] = val.lower() == "true"
            continue
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "'\"":
            values[key] = val[1:-1]
            continue
        try:
            values[key] = int(val)
        except ValueError:
            try:
                values[key] = float(val)
            except ValueError:
                values[key] = val
    return values


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: list, outputs: list, metrics: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "created_unix": int(time.time()),
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
    }
    if metrics is not None:
        manifest["metrics"] = metrics
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


# -- shared loading ----------------------------------------------------------------


def _load_inputs(args) -> tuple[Corpus, frozenset]:
    corpus = load_corpus(args.doctors, args.dialogues)
    stoplist = load_termlist(args.stoplist) if getattr(args, "stoplist", None) else frozenset()
    return corpus, stoplist


def _load_split(args, corpus):
    if getattr(args, "split", None):
        return split_from_json(json.loads(Path(args.split).read_text(encoding="utf-8")))
    return split_dataset(corpus, seed=getattr(args, "seed", 0) or 0)


def _merged_config(args) -> dict:
    cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
    known = _CONFIG_KEYS_ENCODER | _CONFIG_KEYS_MODEL | _CONFIG_KEYS_PRETRAIN
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg

_FLAG_OVERRIDES = ("heads", "mlp_hidden", "neg_ratio", "lr", "batch", "max_epochs",
                   "patience", "seed", "pool_size", "encoder_mode", "dim",
                   "hash_buckets")


def _model_config(args, cfg: dict, **forced) -> ModelConfig:
    merged = dict(cfg)
    for flag in _FLAG_OVERRIDES:
        val = getattr(args, flag, None)
        if val is not None:
            merged[flag] = val
    merged.update(forced)
    kwargs = {}
    for field in ("heads", "mlp_hidden", "neg_ratio", "lr", "batch", "max_epochs",
                  "patience", "seed", "pool_size", "encoder_mode", "max_dialogues"):
        if field in merged:
            kwargs[field] = merged[field]
    if "lambda" in merged:
        kwargs["lam"] = merged["lambda"]
    if getattr(args, "lam", None) is not None:
        kwargs["lam"] = args.lam
    return ModelConfig(**kwargs)


def _encoder_config(args, cfg: dict) -> EncoderConfig:
    return EncoderConfig(
        hash_buckets=getattr(args, "hash_buckets", None) or cfg.get("hash_buckets", 4096),
        dim=getattr(args, "dim", None) or cfg.get("dim", 64),
        seed=cfg.get("encoder_seed", getattr(args, "seed", None) or cfg.get("seed", 0)),
    )


def _pretrain_config(args, cfg: dict) -> selflearn.PretrainConfig:
    kwargs = {}
    mapping = {"pretrain_neg_ratio": "neg_ratio", "pretrain_epochs": "epochs",
               "pretrain_batch": "batch", "pretrain_lr": "lr",
               "pretrain_patience": "patience", "pretrain_hidden": "mlp_hidden"}
    for key, field in mapping.items():
        if key in cfg:
            kwargs[field] = cfg[key]
    kwargs["seed"] = getattr(args, "seed", None) or cfg.get("seed", 0)
    return selflearn.PretrainConfig(**kwargs)


# -- model bundles -------------------------------------------------------------------


def save_bundle(out_dir: Path, model: RecModel, split_seed: int,
                stoplist, history=None, vectors_path=None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(ckpt, model.params(), extra_header={"stage": "ranker"})
    if model.embedder.trainable:
        enc = model.embedder.encoder.config
        encoder_meta = {"type": "hash", "hash_buckets": enc.hash_buckets,
                        "dim": enc.dim, "seed": enc.seed}
    else:
        encoder_meta = {"type": "vectors", "path": str(vectors_path),
                        "dim": model.embedder.dim}
    meta = {
        "format": 1,
        "model": {f.name: getattr(model.config, f.name)
                  for f in dataclasses.fields(model.config)},
        "encoder": encoder_meta,
        "pool": model.pool,
        "split_seed": split_seed,
        "stoplist": sorted(stoplist),
    }
    meta_path = out_dir / "model.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    outputs = [ckpt, meta_path]
    if history is not None:
        hist_path = out_dir / "history.json"
        hist_path.write_text(json.dumps(history.to_json(), indent=2) + "\n",
                             encoding="utf-8")
        outputs.append(hist_path)
    return outputs


def load_bundle(bundle: Path, corpus: Corpus, split) -> RecModel:
    bundle = Path(bundle)
    meta_path = bundle / "model.json" if bundle.is_dir() else bundle
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = ModelConfig(**meta["model"])
    stoplist = frozenset(meta.get("stoplist", ()))
    enc_meta = meta["encoder"]
    if enc_meta["type"] == "hash":
        encoder = HashEncoder.create(EncoderConfig(
            hash_buckets=enc_meta["hash_buckets"], dim=enc_meta["dim"],
            seed=enc_meta["seed"]))
        model = ranker.build_model(corpus, split, cfg, encoder=encoder,
                                   stoplist=stoplist)
    else:
        store = load_vectors(enc_meta["path"])
        model = ranker.build_model(corpus, split, cfg, store=store,
                                   stoplist=stoplist)
    if model.pool != meta["pool"]:
        raise ValueError("candidate pool derived from the corpus/split does not "
                         "match the checkpointed pool; wrong corpus or split?")
    load_into(meta_path.parent / "model.ckpt", model.params())
    return model


def _load_pretrained_encoder(path, enc_cfg: EncoderConfig) -> HashEncoder:
    encoder = HashEncoder.create(enc_cfg)
    header = load_into(path, encoder.params())
    if header.get("stage") not in ("selflearn", None):
        raise ValueError(f"{path} is not an encoder checkpoint (stage="
                         f"{header.get('stage')!r})")
    return encoder


# -- subcommands ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    corpus, _ = _load_inputs(args)
    summary = {"doctors": len(corpus.doctors), "dialogues": len(corpus.dialogues),
               "departments": len(corpus.departments)}
    print(json.dumps(summary))
    if args.out:
        write_manifest(Path(args.out), "ingest", summary,
                       [args.doctors, args.dialogues], [])
    return 0


def cmd_stats(args) -> int:
    corpus, _ = _load_inputs(args)
    lexicon = load_termlist(args.lexicon) if args.lexicon else frozenset()
    report = corpus_stats(corpus, lexicon)
    print(json.dumps(report.to_json(), indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
        write_manifest(out, "stats", {"lexicon": args.lexicon},
                       [args.doctors, args.dialogues], [out / "stats.json"])
    return 0


def cmd_split(args) -> int:
    corpus, _ = _load_inputs(args)
    split = split_dataset(corpus, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split_path = out / "split.json"
    split_path.write_text(json.dumps(split_to_json(split)) + "\n", encoding="utf-8")
    print(f"split written to {split_path}: {len(split.train_dialogues)} train "
          f"dialogues, {len(split.queries_of('val'))} val / "
          f"{len(split.queries_of('test'))} test queries")
    write_manifest(out, "split", {"seed": args.seed},
                   [args.doctors, args.dialogues], [split_path])
    return 0


def cmd_gen_synth(args) -> int:
    fields = {f.name for f in dataclasses.fields(synth.SynthConfig)}
    kwargs = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    cfg = synth.SynthConfig(**kwargs)
    corpus, truth = synth.generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doctors_path, dialogues_path = out / "doctors.jsonl", out / "dialogues.jsonl"
    save_corpus(corpus, doctors_path, dialogues_path)
    truth_path = out / "ground_truth.json"
    synth.write_ground_truth(truth_path, truth)
    print(f"generated {len(corpus.doctors)} doctors / {len(corpus.dialogues)} "
          f"dialogues into {out}")
    write_manifest(out, "gen-synth", dataclasses.asdict(cfg), [],
                   [doctors_path, dialogues_path, truth_path])
    return 0


def cmd_pretrain(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    cfg = _merged_config(args)
    enc_cfg = _encoder_config(args, cfg)
    pcfg = _pretrain_config(args, cfg)
    encoder = HashEncoder.create(enc_cfg)
    pairs = selflearn.make_pairs(corpus, split, pcfg)
    result = selflearn.pretrain(encoder, pairs, pcfg, corpus=corpus,
                                stoplist=stoplist,
                                progress=print if args.verbose else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "encoder.ckpt"
    save_checkpoint(ckpt, encoder.params(), extra_header={"stage": "selflearn"})
    report_path = out / "pretrain_report.json"
    report_path.write_text(json.dumps(result.report.to_json(), indent=2) + "\n")
    print(f"held-out pair accuracy: {result.report.accuracy:.3f} "
          f"(best epoch {result.report.best_epoch})")
    write_manifest(out, "pretrain",
                   {"encoder": dataclasses.asdict(enc_cfg),
                    "pretrain": dataclasses.asdict(pcfg)},
                   [args.doctors, args.dialogues], [ckpt, report_path],
                   metrics={"accuracy": result.report.accuracy})
    return 0


def _prepare_encoder(args, cfg, enc_cfg) -> HashEncoder:
    if getattr(args, "encoder_checkpoint", None):
        return _load_pretrained_encoder(args.encoder_checkpoint, enc_cfg)
    return HashEncoder.create(enc_cfg)


def cmd_train(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    cfg = _merged_config(args)
    mcfg = _model_config(args, cfg)
    store = load_vectors(args.vectors) if args.vectors else None
    encoder = None if store is not None else _prepare_encoder(
        args, cfg, _encoder_config(args, cfg))
    result = ranker.train(corpus, split, mcfg, encoder=encoder, store=store,
                          stoplist=stoplist,
                          progress=print if args.verbose else None)
    out = Path(args.out)
    outputs = save_bundle(out, result.model, split.seed, stoplist,
                          history=result.history, vectors_path=args.vectors)
    print(f"trained {mcfg.encoder_mode} model: best epoch "
          f"{result.history.best_epoch}/{result.history.epochs_run}, "
          f"val loss {min(result.history.val_loss):.4f}")
    write_manifest(out, "train", {"model": dataclasses.asdict(mcfg)},
                   [args.doctors, args.dialogues], outputs,
                   metrics={"best_val_loss": min(result.history.val_loss)})
    return 0


def _report_out(args, report: metrics_mod.MetricsReport, name: str,
                extra_config: dict, inputs: list) -> None:
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{name}.json"
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        write_manifest(out, name, extra_config, inputs, [path],
                       metrics=report.to_json()["overall"])


def cmd_eval(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    queries = split.queries_of(args.on)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        cfg = _merged_config(args)
        reports = []
        for seed in seeds:
            enc_cfg = _encoder_config(args, {**cfg, "encoder_seed": seed})
            mcfg = _model_config(args, cfg, seed=seed)
            encoder = HashEncoder.create(enc_cfg)
            if not args.no_selflearn:
                pcfg = selflearn.PretrainConfig(
                    **{**dataclasses.asdict(_pretrain_config(args, cfg)), "seed": seed})
                selflearn.pretrain(encoder, selflearn.make_pairs(corpus, split, pcfg),
                                   pcfg, corpus=corpus, stoplist=stoplist)
            result = ranker.train(corpus, split, mcfg, encoder=encoder,
                                  stoplist=stoplist)
            reports.append(ranker.evaluate(result.model, queries,
                                           bucket=args.bucket))
        averaged = metrics_mod.MetricsReport(
            p_at_1=float(np.mean([r.p_at_1 for r in reports])),
            map=float(np.mean([r.map for r in reports])),
            err_at_5=float(np.mean([r.err_at_5 for r in reports])),
            query_count=reports[0].query_count,
        )
        print(f"averaged over seeds {seeds}:")
        _report_out(args, averaged, "eval", {"seeds": seeds, "on": args.on},
                    [args.doctors, args.dialogues])
        return 0
    if not args.checkpoint:
        raise ValueError("eval needs either --checkpoint or --seeds")
    model = load_bundle(Path(args.checkpoint), corpus, split)
    report = ranker.evaluate(model, queries, bucket=args.bucket)
    _report_out(args, report, "eval",
                {"checkpoint": str(args.checkpoint), "on": args.on,
                 "bucket": args.bucket},
                [args.doctors, args.dialogues])
    return 0


def cmd_baseline(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    cfg = _merged_config(args)
    bcfg = bl.BaselineConfig(kind=args.kind, k_neighbors=args.k_neighbors,
                             seed=args.seed or 0)
    pool = candidate_pool(corpus, split, args.pool_size or cfg.get("pool_size", 100))
    queries = split.queries_of(args.on)
    queries = [q for q in queries if q.gold_doctor_id in set(pool)]
    counts = training_counts(corpus, split)

    if bcfg.kind in ("mlp_p", "mlp_d", "mlp_pd"):
        mcfg = _model_config(args, cfg, encoder_mode=bcfg.kind)
        encoder = _prepare_encoder(args, cfg, _encoder_config(args, cfg))
        result = bl.train_mlp_baseline(corpus, split, bcfg.kind, mcfg,
                                       encoder=encoder, stoplist=stoplist)
        report = ranker.evaluate(result.model, queries)
    else:
        documents = build_documents(corpus, stoplist)
        encoder = _prepare_encoder(args, cfg, _encoder_config(args, cfg))
        index = bl.FrozenIndex(corpus, split, documents, encoder=encoder)
        rankings = []
        for q in queries:
            if bcfg.kind == "random":
                rankings.append(bl.rank_random(q.query_id, pool, bcfg.seed))
            elif bcfg.kind == "frequency":
                rankings.append(bl.rank_frequency(pool, counts))
            elif bcfg.kind == "knn":
                rankings.append(bl.rank_knn(q, pool, index, k=bcfg.k_neighbors,
                                            train_counts=counts))
            elif bcfg.kind == "cos_profile":
                rankings.append(bl.rank_cosine(q, pool, index, source="profile"))
            else:
                rankings.append(bl.rank_cosine(q, pool, index, source="dialogue_mean"))
        report = ranker.evaluate_rankings(queries, rankings)
    print(f"baseline {bcfg.kind}:")
    _report_out(args, report, f"baseline_{bcfg.kind}",
                {"baseline": dataclasses.asdict(bcfg), "on": args.on},
                [args.doctors, args.dialogues])
    return 0


def cmd_sweep_heads(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    cfg = _merged_config(args)
    head_counts = [int(h) for h in args.heads_list.split(",")]
    enc_cfg = _encoder_config(args, cfg)
    encoder = _prepare_encoder(args, cfg, enc_cfg)
    if not args.encoder_checkpoint and not args.no_selflearn:
        pcfg = _pretrain_config(args, cfg)
        selflearn.pretrain(encoder, selflearn.make_pairs(corpus, split, pcfg),
                           pcfg, corpus=corpus, stoplist=stoplist)
    base_values = [p.value.data.copy() for p in encoder.params()]
    queries = split.queries_of(args.on)
    rows = []
    out = Path(args.out) if args.out else None
    for heads in head_counts:
        for p, v in zip(encoder.params(), base_values):
            p.value.data[:] = v
        mcfg = _model_config(args, cfg, heads=heads)
        result = ranker.train(corpus, split, mcfg, encoder=encoder, stoplist=stoplist)
        report = ranker.evaluate(result.model, queries)
        rows.append((heads, report))
        if out:
            (out / f"heads_{heads}").mkdir(parents=True, exist_ok=True)
            (out / f"heads_{heads}" / "eval.json").write_text(
                json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"{'heads':>6}  {'P@1':>8}  {'MAP':>8}  {'ERR@5':>8}")
    for heads, report in rows:
        print(f"{heads:>6}  {report.p_at_1:>8.4f}  {report.map:>8.4f}  "
              f"{report.err_at_5:>8.4f}")
    if out:
        write_manifest(out, "sweep-heads",
                       {"heads": head_counts, "on": args.on},
                       [args.doctors, args.dialogues],
                       [out / f"heads_{h}" / "eval.json" for h in head_counts],
                       metrics={str(h): r.to_json()["overall"] for h, r in rows})
    return 0


def cmd_explain(args) -> int:
    corpus, _ = _load_inputs(args)
    split = _load_split(args, corpus)
    model = load_bundle(Path(args.checkpoint), corpus, split)
    doctor_id = args.doctor
    query = None
    if args.query_id:
        matches = [q for q in split.queries if q.query_id == args.query_id]
        if not matches:
            raise ValueError(f"unknown query id {args.query_id!r}")
        query = matches[0]
        doctor_id = doctor_id or query.gold_doctor_id
    if not doctor_id:
        raise ValueError("pass --doctor or --query-id")
    heads = ranker.explain(model, doctor_id, k=args.top_k)
    payload = {
        "doctor_id": doctor_id,
        "query_id": args.query_id,
        "query_tokens": list(query.tokens) if query else None,
        "heads": [{"head": h.head, "weights": list(h.weights),
                   "top_tokens": [{"token": t, "weight": w} for t, w in h.top_tokens]}
                  for h in heads],
    }
    print(json.dumps(payload, indent=2))
    for h in heads:
        tokens = ", ".join(t for t, _ in h.top_tokens)
        print(f"head {h.head}: {tokens}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "explain.json").write_text(json.dumps(payload, indent=2) + "\n")
        write_manifest(out, "explain", {"doctor": doctor_id, "k": args.top_k},
                       [args.doctors, args.dialogues], [out / "explain.json"])
    return 0


def cmd_recommend(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    model = load_bundle(Path(args.checkpoint), corpus, split)
    from .corpus import tokenize
    tokens = tokenize(args.query, keep_stopwords=True)
    result = ranker.rank(model, tokens)
    for doctor_id, score in result.top(args.top_k):
        dept = model.departments.get(doctor_id, "")
        print(f"{doctor_id}\t{score:.6f}\t{dept}")
    return 0


def cmd_grad_check(args) -> int:
    """End-to-end gradient check on a small deterministic configuration."""
    scfg = synth.SynthConfig(n_topics=2, n_doctors=args.pool, dialogues_per_doctor=6,
                             turns_per_dialogue=2, tokens_per_turn=5,
                             vocab_per_topic=10, shared_noise_vocab=5,
                             noise_fraction=0.2, expertise_concentration=0.9,
                             seed=7)
    corpus, _ = synth.generate(scfg)
    split = split_dataset(corpus, seed=3)
    mcfg = ModelConfig(heads=args.heads, mlp_hidden=args.mlp_hidden, neg_ratio=2,
                       batch=16, max_epochs=1, patience=0, seed=5,
                       pool_size=args.pool)
    encoder = HashEncoder.create(EncoderConfig(hash_buckets=max(32, 2 * args.dim),
                                               dim=args.dim, seed=11))
    model = ranker.build_model(corpus, split, mcfg, encoder=encoder)
    from .corpus import query_doc_id
    from .tensor import SplitMix64
    rng = SplitMix64(99)
    train_q = [(query_doc_id(d), corpus.dialogues[d].doctor_id)
               for d in sorted(split.train_dialogues)][:3]
    examples = ranker._build_examples(train_q, model.pool, 2, rng)

    err = grad_check(lambda tape: ranker._example_loss(tape, model, examples),
                     model.params(), eps=args.eps)
    passed = err < args.tol
    print(f"max relative error: {err:.3e} ({'PASS' if passed else 'FAIL'} at {args.tol:g})")
    return 0 if passed else 1


def cmd_serve(args) -> int:
    corpus, stoplist = _load_inputs(args)
    split = _load_split(args, corpus)
    model = load_bundle(Path(args.checkpoint), corpus, split)
    bundle = Path(args.checkpoint)
    ckpt = bundle / "model.ckpt" if bundle.is_dir() else bundle.parent / "model.ckpt"
    model_id = _sha256(ckpt)[:16]
    service = RankingService(model, model_id=model_id, stoplist=stoplist)
    print(f"serving model {model_id} on {args.host}:{args.port}")
    serve_forever(service, args.host, args.port)
    return 0


# -- argument parsing -----------------------------------------------------------------


def _add_corpus_flags(p, split_flag=True):
    p.add_argument("--doctors", required=True, help="doctors JSONL file")
    p.add_argument("--dialogues", required=True, help="dialogues JSONL file")
    p.add_argument("--stoplist", help="stopword list, one term per line")
    if split_flag:
        p.add_argument("--split", help="split JSON produced by the split command")
        p.add_argument("--seed", type=int, help="seed (used for the split when "
                                                "--split is absent)")


def _add_model_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--neg-ratio", dest="neg_ratio", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--encoder-mode", dest="encoder_mode",
                   choices=ATTENTION_MODES + ("mlp_p", "mlp_d", "mlp_pd"))
    p.add_argument("--dim", type=int)
    p.add_argument("--hash-buckets", dest="hash_buckets", type=int)
    p.add_argument("--vectors", help="precomputed vector file (frozen embeddings)")
    p.add_argument("--encoder-checkpoint", dest="encoder_checkpoint",
                   help="stage-1 encoder checkpoint")
    p.add_argument("--no-selflearn", dest="no_selflearn", action="store_true")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertmatch",
        description="Expert recommendation over forum dialogues")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate corpus files")
    _add_corpus_flags(p, split_flag=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="corpus statistics report")
    _add_corpus_flags(p, split_flag=False)
    p.add_argument("--lexicon", help="medical term list, one per line")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="write a train/val/test split")
    _add_corpus_flags(p, split_flag=False)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    for f in dataclasses.fields(synth.SynthConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name,
                       type=float if f.type == "float" else int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="stage-1 self-learning alignment")
    _add_corpus_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage-2 recommendation training")
    _add_corpus_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or seed-averaged runs")
    _add_corpus_flags(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint", help="model bundle directory")
    p.add_argument("--on", choices=("val", "test"), default="test")
    p.add_argument("--bucket",
                   choices=("query_len", "dialogue_len", "profile_len", "department"))
    p.add_argument("--seeds", help="comma list: train+eval per seed and average")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run a baseline ranker")
    _add_corpus_flags(p)
    _add_model_flags(p)
    p.add_argument("--kind", required=True, choices=bl.BASELINE_KINDS)
    p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=20)
    p.add_argument("--on", choices=("val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep-heads", help="train/evaluate across head counts")
    _add_corpus_flags(p)
    _add_model_flags(p)
    p.add_argument("--heads-list", dest="heads_list", default="2,4,6,8")
    p.add_argument("--on", choices=("val", "test"), default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_heads)

    p = sub.add_parser("explain", help="per-head attention keywords for a doctor")
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--doctor")
    p.add_argument("--query-id", dest="query_id")
    p.add_argument("--top-k", dest="top_k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("recommend", help="rank doctors for a free-form query")
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top", dest="top_k", type=int, default=5)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("grad-check", help="finite-difference check of the gradients")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int, default=8)
    p.add_argument("--pool", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("serve", help="HTTP ranking service")
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8341)
    p.set_defaults(func=cmd_serve)

    return parser


_ERROR_CATEGORIES = (
    (CorpusError, "corpus error", 3),
    (FileNotFoundError, "file error", 4),
    (TrainingDivergedError, "training error", 6),
    (ValueError, "config error", 5),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single exit funnel for the CLI
        for exc_type, label, code in _ERROR_CATEGORIES:
            if isinstance(exc, exc_type):
                print(f"{label}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
