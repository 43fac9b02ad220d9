"""Experiment orchestration: QA datasets, group-preserving splits, dataset
statistics, the staged end-to-end run and markdown report rendering."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .corpus import EmptyManualError, Manual, corpus_stats, read_manuals, read_raw_documents, segment, stats_csv, write_manuals
from .encoder import SPECIAL_TOKENS, EncoderConfig, LayeredEncoder, Vocab
from .metrics import METRIC_COLUMNS, MetricReport, build_report, markdown_row
from .mtl import AR_MODES, QARecord, MTLModel, TrainConfig, index_for, infer, train_mtl, train_sqp
from .pretrain import PretrainConfig, encode_corpus, make_batches, pretrain
from .retrieval import METHODS, EmbeddingTable, RetrievalIndex, TemplateQuestionGenerator, build_index, load_embeddings, load_index, rank_of, save_index
from .text import tokenize

logger = logging.getLogger(__name__)

STAGES = ("ingest", "index", "pretrain", "split", "train", "infer", "eval")
HITS_KS = (1, 5, 10)


# -- configuration ------------------------------------------------------------------------


@dataclass
class RetrievalSettings:
    method: str = "tfidf"
    expand: bool = True
    k: int = 10
    m: int = 3
    remove_stopwords: bool = False


@dataclass
class EncoderSettings:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 128
    init_std: float = 0.1
    min_count: int = 1
    seed: int = 0
    base: Optional[str] = None  # starting checkpoint; random init when unset


@dataclass
class PretrainSettings:
    enabled: bool = True
    strategy: str = "EWC_LRD"
    slr_lr: float = 5e-5
    lrd_head_lr: float = 5e-4
    lrd_factor: float = 2.6
    lrd_mode: str = "geometric"
    mask_prob: float = 0.15
    batch_size: int = 64
    epochs: int = 1
    ewc_lambda: float = 0.1
    fisher_samples: int = 8
    anchor: Optional[str] = None  # generic-domain text, one sentence per line
    seed: int = 0

    def to_config(self) -> PretrainConfig:
        d = asdict(self)
        for key in ("enabled", "anchor"):
            d.pop(key)
        return PretrainConfig(**d)


@dataclass
class TrainSettings:
    mode: str = "mtl"
    ar: str = "sentence"
    batch_size: int = 32
    epochs: int = 50
    patience: int = 3
    lr: float = 1e-3
    pos_weight: Optional[float] = None
    threshold: float = 0.5
    seed: int = 0


@dataclass
class SplitSettings:
    ratios: tuple[float, ...] = (0.7, 0.2, 0.1)
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    corpus: str = ""
    qa: str = ""
    out: str = "runs"
    embeddings: Optional[str] = None  # GloVe-style text for S+WMS; encoder embeddings otherwise
    toc_filter: bool = True
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    split: SplitSettings = field(default_factory=SplitSettings)

    def validate(self) -> None:
        ratios = self.split.ratios
        if not ratios or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")
        if self.retrieval.k < 1:
            raise ValueError("retrieval.k must be >= 1")
        if self.retrieval.method not in METHODS:
            raise ValueError(f"retrieval.method must be one of {METHODS}")
        if self.train.mode not in ("mtl", "sqp"):
            raise ValueError("train.mode must be 'mtl' or 'sqp'")
        if self.train.ar not in AR_MODES:
            raise ValueError(f"train.ar must be one of {AR_MODES}")
        if self.retrieval.method == "avg_embedding" and not self.embeddings:
            raise ValueError("retrieval.method 'avg_embedding' needs an embeddings file")
        self.pretrain.to_config()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"]["ratios"] = list(self.split.ratios)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        for key, value in _flatten(data):
            set_option(cfg, key, value)
        return cfg

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        with open(path, "rb") as fh:
            cfg = cls.from_dict(tomllib.load(fh))
        # relative paths in a config file are relative to that file
        for obj, attr in _path_fields(cfg):
            value = getattr(obj, attr)
            if value and not Path(value).is_absolute():
                setattr(obj, attr, str(path.parent / value))
        return cfg

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name

    @property
    def model_label(self) -> str:
        strategy = self.pretrain.strategy if self.pretrain.enabled else "NONE"
        prefix = "MTL" if self.train.mode == "mtl" else f"SQP({strategy})"
        return f"{prefix}-{self.train.ar[0].upper()}"


def _path_fields(cfg: ExperimentConfig):
    return [(cfg, "corpus"), (cfg, "qa"), (cfg, "out"), (cfg, "embeddings"), (cfg.encoder, "base"), (cfg.pretrain, "anchor")]


def _flatten(data: Mapping[str, Any], prefix: str = ""):
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            yield from _flatten(value, name + ".")
        else:
            yield name, value


def set_option(cfg: ExperimentConfig, key: str, value: Any) -> None:
    """Assign a dotted key such as ``train.epochs``; strings are parsed as TOML values."""
    *parents, leaf = key.split(".")
    obj = cfg
    for part in parents:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    names = {f.name for f in dataclasses.fields(obj)}
    if leaf not in names or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise KeyError(f"unknown config key {key!r}")
    if isinstance(value, str):
        value = _parse_value(value, getattr(obj, leaf))
    if isinstance(getattr(obj, leaf), tuple) and isinstance(value, list):
        value = tuple(value)
    setattr(obj, leaf, value)


def _parse_value(text: str, current: Any) -> Any:
    if isinstance(current, str) or text == "":
        return text
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        if current is None:
            return text
        raise ValueError(f"cannot parse {text!r} as a value like {current!r}") from None


# -- QA datasets --------------------------------------------------------------------------


def load_qa_dataset(path: str | Path, manuals: Optional[Sequence[Manual]] = None) -> list[QARecord]:
    """Read a QA JSONL file; with ``manuals``, also check each answer against its gold section."""
    by_id = {m.manual_id: m for m in manuals} if manuals is not None else None
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = QARecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed QA record ({exc})") from exc
            if rec.qid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate qid {rec.qid!r}")
            seen.add(rec.qid)
            if by_id is not None:
                if rec.manual_id not in by_id:
                    raise ValueError(f"record {rec.qid!r}: unknown manual {rec.manual_id!r}")
                try:
                    section = by_id[rec.manual_id].section(rec.gold_section_id)
                except KeyError:
                    raise ValueError(f"record {rec.qid!r}: unknown section {rec.gold_section_id!r}") from None
                rec.check_section(section)
            records.append(rec)
    return records


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[QARecord, ...]
    validation: tuple[QARecord, ...]
    test: tuple[QARecord, ...]

    def parts(self) -> tuple[tuple[QARecord, ...], ...]:
        return self.train, self.validation, self.test

    def to_dict(self) -> dict:
        return {name: [r.qid for r in part] for name, part in zip(("train", "validation", "test"), self.parts())}


def split_dataset(records: Sequence[QARecord], ratios: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle paraphrase groups with ``seed`` and hand each to the split furthest below its target.

    Ties go to the earlier split.  Record order inside a split follows the input.
    """
    if len(ratios) != 3:
        raise ValueError("expected three ratios: train, validation, test")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {tuple(ratios)}")
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.paraphrase_group, []).append(i)
    if len(groups) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} paraphrase groups to split, got {len(groups)}")
    names = list(groups)
    order = np.random.default_rng(seed).permutation(len(names))
    targets = [r * len(records) for r in ratios]
    sizes = [0] * len(ratios)
    assign: dict[int, int] = {}
    for g in order:
        members = groups[names[g]]
        part = max(range(len(ratios)), key=lambda j: (targets[j] - sizes[j], -j))
        sizes[part] += len(members)
        for i in members:
            assign[i] = part
    parts = [tuple(records[i] for i in range(len(records)) if assign[i] == j) for j in range(3)]
    return DatasetSplit(*parts)


@dataclass
class DatasetStats:
    n: int
    qtype_counts: dict[str, int]
    qtype_pct: dict[str, float]
    paraphrase_pct: float
    avg_question_len: float
    avg_answer_len: float
    prefix_hist: dict[str, int]

    def table_row(self, name: str) -> dict[str, str]:
        return {
            "Dataset": name,
            "No. of QA pairs": f"{self.n:,}",
            "% factual": f"{self.qtype_pct['factual']:.2f}",
            "% procedural": f"{self.qtype_pct['procedural']:.2f}",
            "% location": f"{self.qtype_pct['location']:.2f}",
            "% paraphrased": f"{self.paraphrase_pct:.2f}",
            "Avg Question Length": f"{self.avg_question_len:.1f}",
            "Avg. Answer Length": f"{self.avg_answer_len:.1f}",
        }


def dataset_stats(records: Sequence[QARecord]) -> DatasetStats:
    """Category shares count the first question of each paraphrase group; the
    remaining group members form the paraphrase share, and ``other`` takes
    whatever is left so that all shares add up to 100."""
    n = len(records)
    counts = {q: 0 for q in ("factual", "procedural", "location", "other")}
    seen_groups: set[str] = set()
    first_counts = dict(counts)
    for rec in records:
        counts[rec.qtype] += 1
        if rec.paraphrase_group not in seen_groups:
            seen_groups.add(rec.paraphrase_group)
            first_counts[rec.qtype] += 1
    if n == 0:
        return DatasetStats(0, counts, {q: 0.0 for q in counts}, 0.0, 0.0, 0.0, {})
    pct = {q: 100.0 * first_counts[q] / n for q in ("factual", "procedural", "location")}
    paraphrase = 100.0 * (n - len(seen_groups)) / n
    pct["other"] = max(0.0, 100.0 - sum(pct.values()) - paraphrase)
    prefixes = Counter(" ".join(tokenize(r.question)[:3]) for r in records)
    return DatasetStats(
        n=n,
        qtype_counts=counts,
        qtype_pct=pct,
        paraphrase_pct=paraphrase,
        avg_question_len=sum(len(tokenize(r.question)) for r in records) / n,
        avg_answer_len=sum(len(tokenize(r.answer_text)) for r in records) / n,
        prefix_hist=dict(sorted(prefixes.items(), key=lambda kv: (-kv[1], kv[0]))),
    )


def hits_by_manual(records: Sequence[QARecord], indexes, Ks: Sequence[int] = HITS_KS) -> dict[int, float]:
    """Hits@K over records that may come from different manuals."""
    ranks = []
    for rec in records:
        index = index_for(indexes, rec)
        if rec.gold_section_id not in set(index.section_ids):
            raise KeyError(f"record {rec.qid!r}: gold section {rec.gold_section_id!r} is not in the index")
        ranks.append(rank_of(rec.question, rec.gold_section_id, index))
    if not ranks:
        return {k: 0.0 for k in Ks}
    return {k: sum(r <= k for r in ranks) / len(ranks) for k in Ks}


# -- report rendering ---------------------------------------------------------------------


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render_property_table(csv_text: str) -> str:
    """Corpus statistics CSV (``property,value``) as a two-column table."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows or rows[0] != ["property", "value"]:
        raise ValueError("expected a CSV with header 'property,value'")
    return _md_table(["Property", "Value"], rows[1:])


def read_metric_csv(text: str) -> dict[str, float]:
    """The ``mean`` row of a MetricReport CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        if row.get("qid") == "mean":
            return {k: float(v) for k, v in row.items() if k != "qid" and v != ""}
    raise ValueError("metric CSV has no 'mean' row")


def reference_blocks(means: Mapping[str, float]) -> list[dict[str, float]]:
    """Split the means of a multi-reference CSV into one block per reference."""
    blocks, j = [], 0
    while True:
        suffix = "" if j == 0 else f"_ref{j}"
        if f"em{suffix}" not in means:
            return blocks
        blocks.append({c: means[c + suffix] for c in METRIC_COLUMNS})
        j += 1


_METRIC_HEADER = ["EM", "P", "R", "F1", "S+WMS"]


def render_model_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    """One row per model: MODEL | EM | P | R | F1 | S+WMS."""
    head = "| MODEL | " + " | ".join(_METRIC_HEADER) + " |\n|" + "---|" * 6 + "\n"
    return head + "".join(markdown_row(label, block) for label, block in rows)


def render_ablation_table(rows: Sequence[tuple[str, Mapping[str, float], Optional[Mapping[str, float]]]]) -> str:
    """Sentence-wise and token-wise metric blocks side by side per model."""
    header = ["MODEL"] + [f"S-{h}" for h in _METRIC_HEADER] + [f"T-{h}" for h in _METRIC_HEADER]
    body = []
    for label, sent, tok in rows:
        cells = [label]
        for block in (sent, tok):
            cells += [f"{block[c]:.3f}" if block else "-" for c in METRIC_COLUMNS]
        body.append(cells)
    return _md_table(header, body)


def render_reference_table(blocks: Sequence[Mapping[str, float]], labels: Optional[Sequence[str]] = None) -> str:
    """One row per reference set (AGT for the annotated answer, CGT for the first extra reference)."""
    labels = labels or ["AGT"] + ["CGT" if j == 1 else f"CGT{j}" for j in range(1, len(blocks))]
    head = "| GT | " + " | ".join(_METRIC_HEADER) + " |\n|" + "---|" * 6 + "\n"
    return head + "".join(markdown_row(lbl, b) for lbl, b in zip(labels, blocks))


def hits_csv(rows: Sequence[tuple[str, Mapping[int, float]]], Ks: Sequence[int] = HITS_KS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", *(f"hits@{k}" for k in Ks)])
    for method, hits in rows:
        writer.writerow([method, *(f"{hits[k]:.6f}" for k in Ks)])
    return buf.getvalue()


def read_hits_csv(text: str) -> list[tuple[str, dict[int, float]]]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        method = row.pop("method")
        out.append((method, {int(k.split("@")[1]): float(v) for k, v in row.items()}))
    return out


def render_hits_table(rows: Sequence[tuple[str, Mapping[int, float]]], Ks: Sequence[int] = HITS_KS) -> str:
    return _md_table(["", *(f"Hits@{k}" for k in Ks)], [[m, *(f"{h[k]:.3f}" for k in Ks)] for m, h in rows])


def render_dataset_table(rows: Sequence[tuple[str, DatasetStats]]) -> str:
    cells = [s.table_row(name) for name, s in rows]
    header = list(cells[0]) if cells else list(DatasetStats(0, {}, {q: 0.0 for q in ("factual", "procedural", "location")}, 0, 0, 0, {}).table_row(""))
    return _md_table(header, [list(c.values()) for c in cells])


def dataset_stats_csv(stats: DatasetStats) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["property", "value"])
    writer.writerow(["qa_pairs", stats.n])
    for q, v in stats.qtype_pct.items():
        writer.writerow([f"pct_{q}", f"{v:.2f}"])
    writer.writerow(["pct_paraphrased", f"{stats.paraphrase_pct:.2f}"])
    writer.writerow(["avg_question_length", f"{stats.avg_question_len:.1f}"])
    writer.writerow(["avg_answer_length", f"{stats.avg_answer_len:.1f}"])
    for prefix, count in stats.prefix_hist.items():
        writer.writerow([f"prefix:{prefix}", count])
    return buf.getvalue()


# -- end-to-end runs ----------------------------------------------------------------------


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def git_blob_sha1(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def encoder_embedding_table(encoder: LayeredEncoder) -> EmbeddingTable:
    """Input token embeddings of ``encoder`` as an embedding table (special tokens left out)."""
    weights = encoder.embedding.tokens.weight.detach().numpy()
    vectors = {tok: weights[i].copy() for i, tok in enumerate(encoder.vocab.itos) if tok not in SPECIAL_TOKENS}
    return EmbeddingTable(dimension=encoder.cfg.d_model, vectors=vectors)


class _Run:
    """Paths and lazily loaded artifacts of one run directory."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.dir = cfg.run_dir
        self._cache: dict[str, Any] = {}

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    def manuals(self) -> list[Manual]:
        if "manuals" not in self._cache:
            self._cache["manuals"] = read_manuals(self.path("manuals.jsonl"))
        return self._cache["manuals"]

    def indexes(self) -> dict[str, RetrievalIndex]:
        if "indexes" not in self._cache:
            self._cache["indexes"] = {m.manual_id: load_index(self.path("index", m.manual_id)) for m in self.manuals()}
        return self._cache["indexes"]

    def records(self) -> list[QARecord]:
        if "records" not in self._cache:
            self._cache["records"] = load_qa_dataset(self.cfg.qa, self.manuals())
        return self._cache["records"]

    def split(self) -> DatasetSplit:
        if "split" not in self._cache:
            ids = json.loads(self.path("split.json").read_text())
            by_qid = {r.qid: r for r in self.records()}
            self._cache["split"] = DatasetSplit(*(tuple(by_qid[q] for q in ids[k]) for k in ("train", "validation", "test")))
        return self._cache["split"]

    def models(self):
        if "models" not in self._cache:
            if self.cfg.train.mode == "mtl":
                self._cache["models"] = MTLModel.load(self.path("model"))
            else:
                self._cache["models"] = (MTLModel.load(self.path("sr_model")), MTLModel.load(self.path("ar_model")))
        return self._cache["models"]

    def embeddings(self) -> Optional[EmbeddingTable]:
        if "embeddings" not in self._cache:
            if self.cfg.embeddings:
                self._cache["embeddings"] = load_embeddings(self.cfg.embeddings)
            else:
                models = self.models()
                ar_model = models[1] if isinstance(models, tuple) else models
                self._cache["embeddings"] = encoder_embedding_table(ar_model.encoder)
        return self._cache["embeddings"]


def _stage_ingest(run: _Run) -> None:
    manuals = []
    for doc in read_raw_documents(run.cfg.corpus):
        try:
            manuals.append(segment(doc, toc_filter=run.cfg.toc_filter))
        except EmptyManualError as exc:
            logger.warning("skipping manual %s: %s", doc.doc_id, exc)
    if not manuals:
        raise ValueError(f"no usable manual in {run.cfg.corpus}")
    write_manuals(manuals, run.path("manuals.jsonl"))
    run.path("corpus_stats.csv").write_text(stats_csv(corpus_stats(manuals)))
    run._cache["manuals"] = manuals


def _stage_index(run: _Run) -> None:
    rc = run.cfg.retrieval
    table = load_embeddings(run.cfg.embeddings) if rc.method == "avg_embedding" else None
    indexes = {}
    for man in run.manuals():
        qgen = TemplateQuestionGenerator(man.sections) if rc.expand else None
        index = build_index(man.sections, rc.method, table, qgen, rc.m, rc.k, rc.remove_stopwords)
        save_index(index, run.path("index", man.manual_id))
        indexes[man.manual_id] = index
    run._cache["indexes"] = indexes


def _stage_pretrain(run: _Run) -> None:
    ec, pc = run.cfg.encoder, run.cfg.pretrain
    manuals = run.manuals()
    if ec.base:
        model = LayeredEncoder.load(ec.base)
    else:
        vocab = Vocab.build((s.full_text for m in manuals for s in m.sections), min_count=ec.min_count)
        arch = EncoderConfig(len(vocab), ec.d_model, ec.n_layers, ec.n_heads, ec.d_ff, ec.max_len, ec.init_std, ec.seed)
        model = LayeredEncoder(arch, vocab)
    if pc.enabled:
        corpus = encode_corpus((s.text for m in manuals for sec in m.sections for s in sec.sentences), model.vocab, model.cfg.max_len)
        anchor = None
        if pc.anchor:
            lines = Path(pc.anchor).read_text(encoding="utf-8").splitlines()
            anchor = make_batches(encode_corpus(lines, model.vocab, model.cfg.max_len), pc.batch_size)
        pretrain(model, corpus, pc.to_config(), anchor_data=anchor)
    model.save(
        run.path("encoder"),
        strategy=pc.strategy if pc.enabled else None,
        seed=pc.seed,
        steps=getattr(model, "steps_trained", 0),
    )


def _stage_split(run: _Run) -> None:
    records = run.records()
    split = split_dataset(records, run.cfg.split.ratios, run.cfg.split.seed)
    run.path("split.json").write_text(json.dumps(split.to_dict(), indent=1))
    run.path("dataset_stats.csv").write_text(dataset_stats_csv(dataset_stats(records)))
    run._cache["split"] = split


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        ar_mode=t.ar, K=cfg.retrieval.k, batch_size=t.batch_size, epochs=t.epochs,
        patience=t.patience, lr=t.lr, seed=t.seed, pos_weight=t.pos_weight,
    )


def _stage_train(run: _Run) -> None:
    split, indexes = run.split(), run.indexes()
    encoder = LayeredEncoder.load(run.path("encoder"))
    tcfg = _train_config(run.cfg)
    val = list(split.validation) or None
    meta = {"mode": run.cfg.train.mode, "ar": tcfg.ar_mode, "seed": tcfg.seed}
    if run.cfg.train.mode == "mtl":
        model = train_mtl(MTLModel(encoder, seed=tcfg.seed), list(split.train), indexes, tcfg, val)
        model.save(run.path("model"), epochs=model.epochs_run, **meta)
        run._cache["models"] = model
    else:
        sr_model, ar_model = train_sqp(list(split.train), indexes, tcfg, encoder, val)
        sr_model.save(run.path("sr_model"), epochs=sr_model.epochs_run, **meta)
        ar_model.save(run.path("ar_model"), epochs=ar_model.epochs_run, **meta)
        run._cache["models"] = (sr_model, ar_model)


def _stage_infer(run: _Run) -> None:
    manuals = {m.manual_id: m for m in run.manuals()}
    indexes, models, t = run.indexes(), run.models(), run.cfg.train
    lines = []
    for rec in run.split().test:
        res = infer(rec.question, manuals[rec.manual_id], indexes[rec.manual_id], models, run.cfg.retrieval.k, t.ar, t.threshold)
        lines.append(json.dumps({"qid": rec.qid, "answer": res.answer_text, "section_id": res.predicted_section_id}) + "\n")
    run.path("predictions.jsonl").write_text("".join(lines))


def _compute_report(run: _Run) -> MetricReport:
    preds = read_predictions(run.path("predictions.jsonl"))
    meta = {"model": run.cfg.model_label, "ar_mode": run.cfg.train.ar, "K": run.cfg.retrieval.k, "seed": run.cfg.train.seed}
    return build_report({q: p["answer"] for q, p in preds.items()}, run.split().test, run.embeddings(), meta)


def _stage_eval(run: _Run) -> MetricReport:
    report = _compute_report(run)
    run.path("report.csv").write_text(report.to_csv())
    run.path("report.md").write_text(report.to_markdown())
    rc = run.cfg.retrieval
    label = rc.method + ("+expansion" if rc.expand else "")
    hits = [(label, hits_by_manual(run.split().test, run.indexes()))]
    run.path("hits.csv").write_text(hits_csv(hits))
    run.path("hits.md").write_text(render_hits_table(hits))
    return report


def read_predictions(path: str | Path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["qid"])] = {"answer": obj["answer"], "section_id": obj.get("section_id")}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction ({exc})") from exc
    return out


_RUNNERS = {
    "ingest": _stage_ingest,
    "index": _stage_index,
    "pretrain": _stage_pretrain,
    "split": _stage_split,
    "train": _stage_train,
    "infer": _stage_infer,
    "eval": _stage_eval,
}


def _input_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    named = {"corpus": cfg.corpus, "qa": cfg.qa, "embeddings": cfg.embeddings, "anchor": cfg.pretrain.anchor, "base": cfg.encoder.base}
    out = {}
    for key, path in named.items():
        if not path:
            continue
        if key == "base":
            out[key] = git_blob_sha1(Path(path).with_suffix(".bin"))
        else:
            out[key] = git_blob_sha1(path)
    return out


def _check_inputs(cfg: ExperimentConfig) -> None:
    cfg.validate()
    required = {"corpus": cfg.corpus, "qa": cfg.qa}
    optional = {"embeddings": cfg.embeddings, "pretrain.anchor": cfg.pretrain.anchor}
    for key, path in required.items():
        if not path or not Path(path).is_file():
            raise FileNotFoundError(f"{key} file not found: {path!r}")
    for key, path in optional.items():
        if path and not Path(path).is_file():
            raise FileNotFoundError(f"{key} file not found: {path!r}")
    if cfg.encoder.base and not Path(cfg.encoder.base).with_suffix(".json").is_file():
        raise FileNotFoundError(f"encoder.base checkpoint not found: {cfg.encoder.base!r}")


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> MetricReport:
    """Run ingest -> index -> pretrain -> split -> train -> infer -> eval under ``<out>/<name>/``.

    ``manifest.json`` records the config, seeds, input hashes and completed
    stages.  A rerun with the same config and inputs resumes after the last
    completed stage; any change to them starts over.
    """
    _check_inputs(cfg)
    run = _Run(cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run.path("manifest.json")
    config = cfg.to_dict()
    inputs = _input_hashes(cfg)
    fingerprint = hashlib.sha1(json.dumps({"config": config, "inputs": inputs}, sort_keys=True).encode()).hexdigest()
    completed: list[str] = []
    if manifest_path.is_file() and not force:
        old = json.loads(manifest_path.read_text())
        if old.get("fingerprint") == fingerprint:
            completed = [s for s in old.get("completed", []) if s in STAGES]
        else:
            logger.info("config or inputs changed; rerunning every stage")
    # a stage only counts as done if every earlier stage is done too
    prefix = []
    for stage in STAGES:
        if stage not in completed:
            break
        prefix.append(stage)
    completed = prefix
    manifest = {
        "name": cfg.name,
        "config": config,
        "inputs": inputs,
        "seeds": {
            "encoder": cfg.encoder.seed,
            "pretrain": cfg.pretrain.seed,
            "split": cfg.split.seed,
            "train": cfg.train.seed,
        },
        "fingerprint": fingerprint,
        "stages": list(STAGES),
        "completed": completed,
        "last_run": [],
    }

    def write_manifest() -> None:
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))

    write_manifest()
    torch.manual_seed(cfg.train.seed)
    report: Optional[MetricReport] = None
    for stage in STAGES:
        if stage in completed:
            continue
        logger.info("running stage %s", stage)
        try:
            result = _RUNNERS[stage](run)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        if stage == "eval":
            report = result
        manifest["completed"].append(stage)
        manifest["last_run"].append(stage)
        write_manifest()
    if report is None:
        report = _compute_report(run)
    return report


def load_experiment_config(path: Optional[str | Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Config from a TOML file (or defaults), then ``key=value`` overrides."""
    cfg = ExperimentConfig.from_toml(path) if path else ExperimentConfig()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        set_option(cfg, key.strip(), value.strip())
    return cfg

