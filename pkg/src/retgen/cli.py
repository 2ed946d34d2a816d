"""``retgen`` command-line entry point.

Every subcommand resolves a :class:`~retgen.config.RunConfig` (preset, then
``--config`` file, then flags) and stamps its outputs with the config hash
and seed.  Exit codes: 0 ok, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("retgen")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(n: int) -> None:
    # only effective before numpy is first imported
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve(args, **flag_overrides):
    from .config import RunConfig

    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    overrides.update({k: v for k, v in flag_overrides.items() if v is not None})
    return RunConfig.resolve(args.preset, args.config, overrides)


class UsageError(Exception):
    pass


def _write_json(path, obj) -> None:
    from .checkpoint import atomic_write_text

    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_vocab(args, *texts_from):
    """Vocabulary from --vocab, else a vocab.txt next to the first file, else built from the inputs."""
    from .text import Vocabulary, build_vocab

    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    for p in texts_from:
        if p and (Path(p).parent / "vocab.txt").exists():
            return Vocabulary.load(Path(p).parent / "vocab.txt")
    return build_vocab([p for p in texts_from if p])


def _load_docs(path, vocab, cfg):
    from .text import IngestStats, load_documents

    stats = IngestStats()
    store = load_documents(path, vocab, cfg["data.doc_cap"], cfg["data.sentence_cap"], stats)
    if not len(store):
        raise ValueError(f"{path}: no usable documents")
    return store


def _load_examples(path, vocab, cfg):
    from .text import load_corpus

    exs = list(load_corpus(path, vocab, cfg["data.max_context"], cfg["data.max_target"]))
    if not exs:
        raise ValueError(f"{path}: no usable examples")
    return exs


def _save_model(path, model, kind: str, cfg) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(path, model.parameters(),
                    {"model": kind, "model_config": model.config.to_dict(), "prefix": model.prefix,
                     "config": cfg.to_dict(), **cfg.header()})


def _load_model(path):
    from .checkpoint import CheckpointError, load_arrays, load_into
    from .generator import GeneratorConfig, GroundedLM
    from .retriever import DualEncoder, RetrieverConfig

    arrays, meta = load_arrays(path)
    kind = meta.get("model")
    if kind in ("generator", "backward"):
        model = GroundedLM(GeneratorConfig(**meta["model_config"]), prefix=meta["prefix"])
    elif kind == "retriever":
        model = DualEncoder(RetrieverConfig(**meta["model_config"]), prefix=meta["prefix"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    load_into(model.parameters(), arrays)
    return model


def _split_valid(examples, n: int):
    n = min(n, len(examples) // 10)
    return (examples[:-n], examples[-n:]) if n else (examples, [])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    from .text import make_synthetic_grounded_corpus, write_jsonl

    cfg = _resolve(args)
    corpus = make_synthetic_grounded_corpus(cfg.synthetic(), cfg["seed"])
    out = Path(args.out)
    header = {"kind": "synthetic", **cfg.header(), "synth": cfg.section("synth")}
    write_jsonl(out / "corpus.jsonl", corpus.examples, header)
    write_jsonl(out / "documents.jsonl", corpus.documents, header)
    print(f"wrote {len(corpus.examples)} examples and {len(corpus.documents)} documents to {out}")
    return 0


def cmd_ingest(args) -> int:
    from .text import IngestStats, build_vocab, load_corpus, load_documents, write_jsonl

    cfg = _resolve(args)
    out = Path(args.out)
    vocab = build_vocab([args.corpus, args.docs], cfg["data.min_freq"])
    cstats, dstats = IngestStats(), IngestStats()
    exs = list(load_corpus(args.corpus, vocab, cfg["data.max_context"], cfg["data.max_target"], cstats))
    store = load_documents(args.docs, vocab, cfg["data.doc_cap"], cfg["data.sentence_cap"], dstats)
    header = {"kind": "ingested", **cfg.header()}
    write_jsonl(out / "corpus.jsonl",
                [{"id": e.id, "context": vocab.detokenize(e.context), "target": vocab.detokenize(e.target),
                  **({"oracle_doc_id": e.oracle_doc_id} if e.oracle_doc_id is not None else {})} for e in exs],
                header)
    write_jsonl(out / "documents.jsonl", [{"id": d.id, "title": d.title, "text": d.raw} for d in store], header)
    vocab.save(out / "vocab.txt")
    report = {**header, "vocab_size": len(vocab), "corpus": vars(cstats), "documents": vars(dstats)}
    _write_json(out / "ingest.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_build_index(args) -> int:
    from .retriever import DualEncoder, build_index, save_index

    cfg = _resolve(args, **{"index.tables": args.tables, "index.bits": args.bits, "retriever.dim": args.dim})
    if args.retriever:
        retriever = _load_model(args.retriever)
        vocab = _load_vocab(args, args.retriever, args.docs)
    else:
        vocab = _load_vocab(args, args.docs)
        retriever = DualEncoder(cfg.retriever(len(vocab)), seed=cfg["seed"])
    store = _load_docs(args.docs, vocab, cfg)
    index = build_index(store, retriever, cfg["index.tables"], cfg["index.bits"], cfg["seed"],
                        probe_radius=cfg["index.probe_radius"])
    save_index(args.out, index, cfg.header())
    print(f"indexed {len(index)} documents: dim={index.dim} tables={index.n_tables} bits={index.n_bits}")
    return 0


def cmd_warm_start(args) -> int:
    from .metrics import recall_at_k
    from .retriever import DualEncoder
    from .trainer import warm_start_retriever

    cfg = _resolve(args, **{"warm_start.steps": args.steps})
    vocab = _load_vocab(args, args.docs, args.corpus)
    store = _load_docs(args.docs, vocab, cfg)
    train, valid = _split_valid(_load_examples(args.corpus, vocab, cfg), 200)
    retriever = DualEncoder(cfg.retriever(len(vocab)), seed=cfg["seed"])
    losses = warm_start_retriever(retriever, train, store, cfg["warm_start.steps"], cfg["warm_start.lr"],
                                  cfg["warm_start.batch_size"], cfg["seed"])
    out = Path(args.out)
    _save_model(out / "retriever.npz", retriever, "retriever", cfg)
    vocab.save(out / "vocab.txt")
    _write_json(out / "config.json", {**cfg.header(), "config": cfg.to_dict()})
    rec = {"steps": len(losses), "final_loss": losses[-1] if losses else None}
    if valid:
        rec["recall@1"] = recall_at_k(retriever, store, valid, 1).recall
    print(json.dumps(rec))
    return 0


def _train_common(args, cfg, generator, retriever, vocab, store, train, valid, out: Path, jc) -> None:
    from .checkpoint import atomic_write_text
    from .metrics import recall_at_k
    from .retriever import save_index
    from .trainer import JointTrainer, expected_reward

    trainer = JointTrainer(generator, retriever, store, jc)
    lines = []

    def emit(rec):
        line = json.dumps(rec, sort_keys=True)
        lines.append(line)
        print(line, flush=True)

    for _ in range(jc.max_steps):
        rec = trainer.train_step(trainer.sample_batch(train))
        rec.pop("step_time")
        if jc.eval_every and trainer.step % jc.eval_every == 0 and valid:
            rec["valid_expected_reward"] = expected_reward(generator, retriever, store, valid, jc.K)
            if any(ex.oracle_doc_id for ex in valid):
                rec["recall@1"] = recall_at_k(retriever, store, valid, 1).recall
        emit(rec)
    _save_model(out / "generator.npz", generator, "generator", cfg)
    _save_model(out / "retriever.npz", retriever, "retriever", cfg)
    save_index(out / "index.npz", trainer.index, cfg.header())
    vocab.save(out / "vocab.txt")
    _write_json(out / "config.json", {**cfg.header(), "config": cfg.to_dict()})
    atomic_write_text(out / "metrics.jsonl",
                      json.dumps({"_meta": cfg.header()}) + "\n" + "".join(l + "\n" for l in lines))


def cmd_train(args) -> int:
    from .generator import GroundedLM
    from .retriever import DualEncoder
    from .trainer import train_backward_model

    cfg = _resolve(args, **{"train.max_steps": args.steps, "train.eval_every": args.eval_every})
    if args.retriever:
        retriever = _load_model(args.retriever)
        vocab = _load_vocab(args, args.retriever)
    else:
        vocab = _load_vocab(args, args.docs, args.corpus)
        retriever = DualEncoder(cfg.retriever(len(vocab)), seed=cfg["seed"])
    store = _load_docs(args.docs, vocab, cfg)
    train, valid = _split_valid(_load_examples(args.corpus, vocab, cfg), 200)
    generator = GroundedLM(cfg.generator(len(vocab)), seed=cfg["seed"])
    jc = cfg.joint(freeze_retriever=args.freeze_retriever, freeze_generator=args.freeze_generator)
    out = Path(args.out)
    _train_common(args, cfg, generator, retriever, vocab, store, train, valid, out, jc)
    if args.backward:
        backward = GroundedLM(cfg.backward_generator(len(vocab)), seed=cfg["seed"] + 1, prefix="bwd.")
        losses = train_backward_model(backward, train, store, cfg["train.backward_steps"],
                                      lr=cfg["train.lr_generator"], batch_size=cfg["train.batch_size"],
                                      seed=cfg["seed"])
        _save_model(out / "backward.npz", backward, "backward", cfg)
        print(json.dumps({"backward_steps": len(losses), "backward_final_loss": losses[-1] if losses else None}))
    return 0


def cmd_retriever_train(args) -> int:
    cfg = _resolve(args, **{"train.max_steps": args.steps, "train.eval_every": args.eval_every})
    model = Path(args.model)
    generator = _load_model(model / "generator.npz")
    retriever = _load_model(model / "retriever.npz")
    vocab = _load_vocab(args, model / "generator.npz")
    store = _load_docs(args.docs, vocab, cfg)
    train, valid = _split_valid(_load_examples(args.corpus, vocab, cfg), 200)
    jc = cfg.joint(freeze_generator=True, freeze_retriever=False)
    _train_common(args, cfg, generator, retriever, vocab, store, train, valid, Path(args.out), jc)
    return 0


def cmd_generate(args) -> int:
    import numpy as np

    from .decoder import decode, mmi_rerank, retrieve_for, sample_hypotheses
    from .retriever import load_index

    cfg = _resolve(args, **{"decode.K": args.k, "decode.mode": args.mode, "decode.max_len": args.max_len})
    model = Path(args.model)
    generator = _load_model(model / "generator.npz")
    retriever = _load_model(model / "retriever.npz")
    vocab = _load_vocab(args, model / "generator.npz")
    store = _load_docs(args.docs, vocab, cfg)
    index = load_index(args.index or model / "index.npz")
    if args.no_correction:
        cfg.values["decode.correction"] = False
    dcfg = cfg.decode()
    backward = _load_model(args.backward_model) if args.mmi else None
    if args.mmi and backward is None:
        raise UsageError("--mmi needs --backward-model")
    if args.context is not None:
        contexts = [args.context]
    else:
        contexts = [l for l in Path(args.context_file).read_text(encoding="utf-8").splitlines() if l.strip()]
    outputs, traces = [], []
    for i, text in enumerate(contexts):
        x = vocab.tokenize(text)
        if args.mmi:
            res = retrieve_for(x, index, retriever, store, dcfg.K, dcfg.retrieval_mode)
            docs = [store[d].text for d in res.doc_ids]
            hyps = sample_hypotheses(generator, x, docs, res.probs, dcfg)
            hyp = mmi_rerank(x, docs, hyps, backward, dcfg.mmi_mean)[0]
        else:
            hyp, res = decode(x, index, retriever, generator, store, dcfg, trace=bool(args.trace))
        out = vocab.detokenize(hyp.tokens)
        outputs.append(out)
        print(out)
        traces.append({"context": i, "doc_ids": res.doc_ids, "probs": np.asarray(res.probs).tolist(),
                       "weights": hyp.weights_trace, "tokens": [vocab.itos[t] for t in hyp.tokens]})
    if args.out:
        from .checkpoint import atomic_write_text

        atomic_write_text(args.out, "".join(o + "\n" for o in outputs))
    if args.trace:
        from .text import write_jsonl

        write_jsonl(args.trace, traces, cfg.header())
    return 0


def _read_lines(path):
    return Path(path).read_text(encoding="utf-8").splitlines()


def _read_multi(path) -> list[list[str]]:
    """One instance per line: a JSON list of strings, or a plain string."""
    rows = []
    for line in _read_lines(path):
        try:
            v = json.loads(line)
        except json.JSONDecodeError:
            v = line
        rows.append([v] if isinstance(v, str) else [str(s) for s in v])
    return rows


def cmd_evaluate(args) -> int:
    import hashlib

    from .metrics import UndefinedMetric, bleu, corpus_kmr, distinct_n, entropy_n, max_pooled_bleu
    from .text import build_stopwords, normalize

    hyps = [normalize(h) for h in _read_lines(args.hyps)]
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    rows = []
    stop_src = Path(args.stopwords).read_bytes() if args.stopwords else b"packaged"
    echo = {"stopwords_sha256": hashlib.sha256(stop_src).hexdigest()[:16], "entropy_base": "e",
            "bleu_max_order": 4}
    for m in wanted:
        if m in ("bleu", "bleu-maxpool"):
            if not args.refs:
                raise UsageError(f"{m} needs --refs")
            refs = [[normalize(r) for r in rs] for rs in _read_multi(args.refs)]
            if len(refs) != len(hyps):
                raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
            val = bleu(hyps, refs) if m == "bleu" else max_pooled_bleu(hyps, refs)
            rows.append((m, val, len(hyps), 0))
        elif m == "kmr":
            if not (args.contexts and args.docs):
                raise UsageError("kmr needs --contexts and --docs")
            ctx = [normalize(c) for c in _read_lines(args.contexts)]
            docs = [[normalize(d) for d in ds] for ds in _read_multi(args.docs)]
            if not len(ctx) == len(docs) == len(hyps):
                raise ValueError("hyps, contexts and docs must have the same number of lines")
            stop = build_stopwords(args.stopwords, [t for ds in docs for t in ds], args.stopword_top_percent)
            r = corpus_kmr(hyps, ctx, docs, stop)
            rows.append((m, r.value, r.count, r.undefined))
        elif m.startswith(("dist-", "entropy-")):
            name, n = m.rsplit("-", 1)
            fn = distinct_n if name == "dist" else entropy_n
            try:
                rows.append((m, fn(hyps, int(n)), len(hyps), 0))
            except UndefinedMetric:
                rows.append((m, float("nan"), 0, len(hyps)))
        else:
            raise UsageError(f"unknown metric {m!r}")
    lines = [f"# {k}\t{v}" for k, v in sorted(echo.items())]
    lines.append("metric\tvalue\tcount\tundefined")
    lines += [f"{m}\t{v:.6f}\t{c}\t{u}" for m, v, c, u in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        from .checkpoint import atomic_write_text

        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="tiny", help="tiny or paper-faithful")
    common.add_argument("--config", help="flat JSON file of dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread budget (env RETGEN_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="retgen", description="Joint retriever and grounded generator toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic grounded-copy corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("ingest", parents=[common], help="filter JSONL corpora and build a vocabulary")
    s.add_argument("--corpus", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("build-index", parents=[common], help="embed documents into an LSH index")
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tables", type=int)
    s.add_argument("--bits", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--retriever", help="retriever checkpoint (random init when omitted)")
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_build_index)

    s = sub.add_parser("warm-start", parents=[common], help="contrastive retriever warm start")
    s.add_argument("--corpus", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_warm_start)

    s = sub.add_parser("train", parents=[common], help="joint generator and retriever training")
    s.add_argument("--corpus", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--retriever", help="initial retriever checkpoint, e.g. from warm-start")
    s.add_argument("--freeze-retriever", action="store_true")
    s.add_argument("--freeze-generator", action="store_true")
    s.add_argument("--eval-every", type=int)
    s.add_argument("--backward", action="store_true", help="also fit the backward model for MMI")
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("retriever-train", parents=[common], help="retriever-only training, generator frozen")
    s.add_argument("--model", required=True, help="directory written by train")
    s.add_argument("--corpus", required=True)
    s.add_argument("--docs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_retriever_train)

    s = sub.add_parser("generate", parents=[common], help="mixture decoding, optionally MMI reranked")
    s.add_argument("--model", required=True, help="directory written by train")
    s.add_argument("--docs", required=True)
    s.add_argument("--index", help="defaults to the model's index.npz")
    s.add_argument("--backward-model")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--context")
    g.add_argument("--context-file")
    s.add_argument("--k", type=int)
    s.add_argument("--mode", choices=["greedy", "topk"])
    s.add_argument("--mmi", action="store_true")
    s.add_argument("--max-len", type=int)
    s.add_argument("--no-correction", action="store_true")
    s.add_argument("--out", help="write generations here, one per line")
    s.add_argument("--trace", help="write per-step document weights as JSONL")
    s.add_argument("--vocab")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="KMR, BLEU, Dist-n and Entropy-n report")
    s.add_argument("--hyps", required=True)
    s.add_argument("--refs")
    s.add_argument("--contexts")
    s.add_argument("--docs", help="JSONL, one list of document texts per instance")
    s.add_argument("--stopwords")
    s.add_argument("--stopword-top-percent", type=float, default=1.0)
    s.add_argument("--metrics", default="bleu,kmr,dist-1,dist-2,entropy-4")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None:
        env = os.environ.get("RETGEN_THREADS")
        if env:
            try:
                args.threads = int(env)
            except ValueError:
                parser.error(f"RETGEN_THREADS must be an integer, got {env!r}")
    if args.threads is not None:
        _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"retgen: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, FloatingPointError) as e:
        print(f"retgen {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
