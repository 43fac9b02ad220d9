"""Command-line entry point (``emqap <command> ...``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .corpus import corpus_stats, read_manuals, read_raw_documents, segment, stats_csv, write_manuals
from .encoder import EncoderConfig, LayeredEncoder, Vocab
from .metrics import build_report, nearest_neighbors
from .mtl import MTLModel, TrainConfig, infer, train_mtl, train_sqp
from .pretrain import STRATEGIES, PretrainConfig, encode_corpus, make_batches, pretrain
from .synthetic import write_fixture
from .retrieval import METHODS, TemplateQuestionGenerator, build_index, load_embeddings, load_index, save_index, top_k


def _manuals_from(path: str):
    """Segmented manuals JSONL, or raw manuals (detected by a ``blocks`` field)."""
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), "")
    if first and "blocks" in json.loads(first):
        return [segment(d) for d in read_raw_documents(path)]
    return read_manuals(path)


def _load_models(model_dir: Path):
    info = json.loads((model_dir / "train.json").read_text())
    if info["mode"] == "mtl":
        return MTLModel.load(model_dir / "model"), info
    return (MTLModel.load(model_dir / "sr_model"), MTLModel.load(model_dir / "ar_model")), info


def cmd_ingest(args) -> int:
    manuals = [segment(d, toc_filter=not args.no_toc_filter) for d in read_raw_documents(args.corpus)]
    write_manuals(manuals, args.out)
    print(stats_csv(corpus_stats(manuals)), end="")
    return 0


def cmd_stats(args) -> int:
    if args.qa:
        stats = harness.dataset_stats(harness.load_qa_dataset(args.qa))
        print(harness.dataset_stats_csv(stats), end="")
    if args.manuals:
        print(stats_csv(corpus_stats(_manuals_from(args.manuals))), end="")
    return 0


def cmd_index(args) -> int:
    table = load_embeddings(args.embeddings) if args.embeddings else None
    out = Path(args.out)
    for man in _manuals_from(args.manuals):
        qgen = TemplateQuestionGenerator(man.sections) if args.expand else None
        index = build_index(man.sections, args.method, table, qgen, args.m, args.k, args.remove_stopwords)
        save_index(index, out / man.manual_id)
        print(f"{man.manual_id}\t{len(index)} sections\t{len(index.vocabulary)} terms")
    return 0


def cmd_retrieve(args) -> int:
    if args.index_path:
        index = load_index(args.index_path)
    else:
        if not args.manuals:
            raise SystemExit("retrieve needs --index-path or --manuals")
        manuals = _manuals_from(args.manuals)
        sections = [s for m in manuals for s in m.sections]
        table = load_embeddings(args.embeddings) if args.embeddings else None
        qgen = TemplateQuestionGenerator(sections) if args.expand else None
        index = build_index(sections, args.method, table, qgen, args.m)
    ranked = top_k(args.question, index, args.k)
    print(json.dumps([{"section_id": sid, "score": s} for sid, s in ranked.entries], indent=1))
    return 0


def cmd_pretrain(args) -> int:
    manuals = _manuals_from(args.corpus)
    if args.base:
        model = LayeredEncoder.load(args.base)
    else:
        vocab = Vocab.build(s.full_text for m in manuals for s in m.sections)
        model = LayeredEncoder(EncoderConfig(len(vocab), args.d_model, args.layers, args.heads, 2 * args.d_model, args.max_len, seed=args.seed), vocab)
    sentences = (s.text for m in manuals for sec in m.sections for s in sec.sentences)
    corpus = encode_corpus(sentences, model.vocab, model.cfg.max_len)
    anchor = None
    if args.anchor:
        lines = Path(args.anchor).read_text(encoding="utf-8").splitlines()
        anchor = make_batches(encode_corpus(lines, model.vocab, model.cfg.max_len), args.batch_size)
    cfg = PretrainConfig(
        strategy=args.strategy, batch_size=args.batch_size, epochs=args.epochs,
        ewc_lambda=args.ewc_lambda, fisher_samples=args.fisher_samples, seed=args.seed,
    )
    losses = []
    pretrain(model, corpus, cfg, anchor_data=anchor, callback=lambda step, loss, _: losses.append(loss))
    model.save(args.out, strategy=args.strategy, seed=args.seed, steps=model.steps_trained)
    print(json.dumps({"steps": model.steps_trained, "first_loss": losses[0], "last_loss": losses[-1]}))
    return 0


def cmd_train(args) -> int:
    manuals = {m.manual_id: m for m in _manuals_from(args.manuals)}
    records = harness.load_qa_dataset(args.qa, list(manuals.values()))
    val = harness.load_qa_dataset(args.val, list(manuals.values())) if args.val else None
    if args.index_dir:
        indexes = {mid: load_index(Path(args.index_dir) / mid) for mid in manuals}
    else:
        indexes = {mid: build_index(m.sections, expansion=TemplateQuestionGenerator(m.sections)) for mid, m in manuals.items()}
    encoder = LayeredEncoder.load(args.pretrained)
    cfg = TrainConfig(ar_mode=args.ar, K=args.k, batch_size=args.batch, epochs=args.epochs,
                      patience=args.patience, lr=args.lr, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "mtl":
        model = train_mtl(MTLModel(encoder, seed=args.seed), records, indexes, cfg, val)
        model.save(out / "model", epochs=model.epochs_run)
        epochs = {"mtl": model.epochs_run}
    else:
        sr_model, ar_model = train_sqp(records, indexes, cfg, encoder, val)
        sr_model.save(out / "sr_model", epochs=sr_model.epochs_run)
        ar_model.save(out / "ar_model", epochs=ar_model.epochs_run)
        epochs = {"sr": sr_model.epochs_run, "ar": ar_model.epochs_run}
    (out / "train.json").write_text(json.dumps({"mode": args.mode, "ar": args.ar, "K": args.k, "seed": args.seed}, indent=1))
    print(json.dumps({"epochs": epochs}))
    return 0


def cmd_infer(args) -> int:
    manuals = {m.manual_id: m for m in _manuals_from(args.manuals)}
    if args.manual not in manuals:
        raise SystemExit(f"unknown manual {args.manual!r}")
    manual = manuals[args.manual]
    if args.index_dir:
        index = load_index(Path(args.index_dir) / args.manual)
    else:
        index = build_index(manual.sections, expansion=TemplateQuestionGenerator(manual.sections))
    models, info = _load_models(Path(args.model))
    res = infer(args.question, manual, index, models, args.k, args.ar or info["ar"], args.threshold)
    print(json.dumps(res.to_dict(), indent=1))
    return 0


def cmd_eval(args) -> int:
    preds = harness.read_predictions(args.predictions)
    records = [r for r in harness.load_qa_dataset(args.qa) if r.qid in preds]
    table = load_embeddings(args.embeddings) if args.embeddings else None
    report = build_report({q: p["answer"] for q, p in preds.items()}, records, table, {"model": args.label})
    if args.out:
        Path(args.out).with_suffix(".csv").write_text(report.to_csv())
        Path(args.out).with_suffix(".md").write_text(report.to_markdown())
    print(report.to_markdown(), end="")
    return 0


def cmd_neighbors(args) -> int:
    words = [w.strip() for w in Path(args.words).read_text(encoding="utf-8").split() if w.strip()]
    encoder = LayeredEncoder.load(args.checkpoint)
    probes = Path(args.probes).read_text(encoding="utf-8").splitlines() if args.probes else ()
    table = nearest_neighbors(words, encoder, args.k, probes)
    print("| Word | Nearest neighbours |\n|---|---|")
    for w in words:
        print(f"| {w} | {', '.join(table[w])} |")
    return 0


def cmd_report(args) -> int:
    read = lambda p: Path(p).read_text(encoding="utf-8")  # noqa: E731
    if args.table == "1":
        print(harness.render_property_table(read(args.input[0][0])), end="")
    elif args.table == "3":
        rows = [(label, harness.read_metric_csv(read(path))) for label, path, *_ in args.row]
        print(harness.render_model_table(rows), end="")
    elif args.table == "4":
        rows = []
        for label, sent, *rest in args.row:
            tok = harness.read_metric_csv(read(rest[0])) if rest else None
            rows.append((label, harness.read_metric_csv(read(sent)), tok))
        print(harness.render_ablation_table(rows), end="")
    elif args.table == "5":
        blocks = harness.reference_blocks(harness.read_metric_csv(read(args.input[0][0])))
        print(harness.render_reference_table(blocks), end="")
    else:  # hits
        rows = [row for (path,) in args.input for row in harness.read_hits_csv(read(path))]
        print(harness.render_hits_table(rows), end="")
    return 0


_RUN_FLAGS = {
    "name": "name", "corpus": "corpus", "qa": "qa", "out": "out", "embeddings": "embeddings",
    "method": "retrieval.method", "k": "retrieval.k", "strategy": "pretrain.strategy",
    "mode": "train.mode", "ar": "train.ar", "epochs": "train.epochs", "patience": "train.patience",
    "batch": "train.batch_size", "seed": "train.seed",
}


def cmd_run(args) -> int:
    cfg = harness.load_experiment_config(args.config, args.set or ())
    for flag, key in _RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            harness.set_option(cfg, key, value)
    report = harness.run_experiment(cfg, force=args.force)
    print(report.to_markdown(), end="")
    return 0


def cmd_toy(args) -> int:
    paths = write_fixture(args.out, seed=args.seed, n_records=args.records)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emqap", description="Question answering over instructional manuals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="clean and segment raw manuals")
    s.add_argument("--corpus", required=True, help="raw manuals JSONL ({manual_id, blocks})")
    s.add_argument("--out", required=True, help="segmented manuals JSONL")
    s.add_argument("--no-toc-filter", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("stats", help="corpus statistics (property,value CSV) and/or QA dataset statistics")
    s.add_argument("--manuals")
    s.add_argument("--qa")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("index", help="build one retrieval index per manual")
    s.add_argument("--manuals", required=True)
    s.add_argument("--out", required=True, help="directory for <manual_id>.json/.bin")
    s.add_argument("--method", choices=METHODS, default="tfidf")
    s.add_argument("--expand", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--m", type=int, default=3, help="generated questions per section")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--embeddings")
    s.add_argument("--remove-stopwords", action="store_true")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", help="rank sections for a question")
    s.add_argument("--question", required=True)
    s.add_argument("--index-path", help="index prefix written by 'index'")
    s.add_argument("--manuals", help="build an index on the fly instead")
    s.add_argument("--method", choices=METHODS, default="tfidf")
    s.add_argument("--expand", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--embeddings")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("pretrain", help="masked-LM pretraining on manual sentences")
    s.add_argument("--corpus", required=True, help="raw or segmented manuals JSONL")
    s.add_argument("--out", required=True, help="checkpoint prefix")
    s.add_argument("--strategy", choices=STRATEGIES, default="EWC_LRD")
    s.add_argument("--ewc-lambda", type=float, default=0.1)
    s.add_argument("--fisher-samples", type=int, default=8)
    s.add_argument("--anchor", help="generic-domain text for the Fisher estimate, one sentence per line")
    s.add_argument("--base", help="start from this encoder checkpoint")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--d-model", type=int, default=32)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--max-len", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="fine-tune SR+AR (mtl) or separate SR and AR models (sqp)")
    s.add_argument("--manuals", required=True)
    s.add_argument("--qa", required=True, help="training QA JSONL")
    s.add_argument("--val", help="validation QA JSONL for early stopping")
    s.add_argument("--pretrained", required=True, help="encoder checkpoint prefix")
    s.add_argument("--index-dir")
    s.add_argument("--out", required=True, help="model directory")
    s.add_argument("--mode", choices=("mtl", "sqp"), default="mtl")
    s.add_argument("--ar", choices=("sentence", "token"), default="sentence")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=3)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="answer one question (JSON output)")
    s.add_argument("--question", required=True)
    s.add_argument("--manual", required=True, help="manual id")
    s.add_argument("--manuals", required=True)
    s.add_argument("--model", required=True, help="model directory written by 'train'")
    s.add_argument("--index-dir")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--ar", choices=("sentence", "token"))
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a predictions JSONL against a QA dataset")
    s.add_argument("--predictions", required=True)
    s.add_argument("--qa", required=True)
    s.add_argument("--embeddings", help="GloVe-style vectors for S+WMS (column left empty otherwise)")
    s.add_argument("--label", default="model")
    s.add_argument("--out", help="prefix for .csv and .md")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("neighbors", help="nearest neighbours of words in PCA space of encoder states")
    s.add_argument("--words", required=True, help="file holding a whitespace-separated word list")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--probes", help="probe sentences, one per line")
    s.set_defaults(func=cmd_neighbors)

    s = sub.add_parser("report", help="render CSV outputs as markdown tables")
    s.add_argument("--table", choices=("1", "3", "4", "5", "hits"), required=True)
    s.add_argument("--input", nargs=1, action="append", default=[], help="CSV file (tables 1, 5, hits)")
    s.add_argument("--row", nargs="+", action="append", default=[], metavar="ARG",
                   help="LABEL CSV (table 3) or LABEL SENTENCE_CSV [TOKEN_CSV] (table 4)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="full experiment from a TOML config")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    s.add_argument("--force", action="store_true", help="rerun every stage")
    for flag in _RUN_FLAGS:
        s.add_argument(f"--{flag}")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("toy", help="write a small synthetic corpus and QA dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--records", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and args.table in ("3", "4") and not args.row:
        raise SystemExit("--row is required for tables 3 and 4")
    if args.command == "report" and args.table in ("1", "5", "hits") and not args.input:
        raise SystemExit("--input is required for this table")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
