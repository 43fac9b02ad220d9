"""Supervised section retrieval (SR) and answer retrieval (AR) over one shared encoder.

Both branches read the same :class:`LayeredEncoder`; each has its own 2-way
classification head.  Inference runs the unsupervised retriever, lets SR pick
one section among the top K and lets AR mark the answer units (sentences or
tokens) inside it.  Answers may be non-contiguous.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Manual, Section
from .encoder import DTYPE, EncoderConfig, LayeredEncoder, Vocab, pad_batch, read_manifest, load_state, save_checkpoint, SPECIAL_TOKENS
from .retrieval import RetrievalIndex, top_k
from .text import surface_tokens, tokenize

logger = logging.getLogger(__name__)

QTYPES = ("factual", "procedural", "location", "other")
AR_MODES = ("sentence", "token")


@dataclass(frozen=True)
class QARecord:
    qid: str
    question: str
    qtype: str
    paraphrase_group: str
    manual_id: str
    gold_section_id: str
    answer_sentence_indices: tuple[int, ...]
    answer_text: str
    extra_references: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "answer_sentence_indices", tuple(int(i) for i in self.answer_sentence_indices))
        object.__setattr__(self, "extra_references", tuple(self.extra_references or ()))
        idx = self.answer_sentence_indices
        if self.qtype not in QTYPES:
            raise ValueError(f"record {self.qid!r}: qtype {self.qtype!r} not in {QTYPES}")
        if not idx:
            raise ValueError(f"record {self.qid!r}: answer_sentence_indices is empty")
        if list(idx) != sorted(set(idx)) or idx[0] < 0:
            raise ValueError(f"record {self.qid!r}: answer_sentence_indices must be sorted, unique and >= 0")

    def check_section(self, section: Section) -> None:
        """Validate indices and answer text against the gold section."""
        if self.answer_sentence_indices[-1] >= len(section.sentences):
            raise ValueError(
                f"record {self.qid!r}: sentence index {self.answer_sentence_indices[-1]} out of range "
                f"for section {section.section_id!r} with {len(section.sentences)} sentences"
            )
        expected = assemble_sentences(section, self.answer_sentence_indices)
        if " ".join(self.answer_text.split()) != " ".join(expected.split()):
            raise ValueError(f"record {self.qid!r}: answer_text does not match its answer sentences")

    @property
    def references(self) -> tuple[str, ...]:
        return (self.answer_text, *self.extra_references)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["answer_sentence_indices"] = list(self.answer_sentence_indices)
        d["extra_references"] = list(self.extra_references)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "QARecord":
        return cls(
            qid=str(obj["qid"]),
            question=obj["question"],
            qtype=obj["qtype"],
            paraphrase_group=str(obj["paraphrase_group"]),
            manual_id=str(obj["manual_id"]),
            gold_section_id=str(obj["gold_section_id"]),
            answer_sentence_indices=tuple(obj["answer_sentence_indices"]),
            answer_text=obj["answer_text"],
            extra_references=tuple(obj.get("extra_references") or ()),
        )


def assemble_sentences(section: Section, indices: Sequence[int]) -> str:
    return " ".join(section.sentences[i].text for i in sorted(set(indices)))


# -- input packing ------------------------------------------------------------------


def section_tokens(section: Section) -> list[str]:
    return [t for s in section.sentences for t in tokenize(s.text)]


def pack(vocab: Vocab, question: str, context_tokens: Sequence[str], max_len: int) -> tuple[list[int], int, int]:
    """``[CLS] question [SEP] context [EOS]`` with the context tail-truncated.

    Returns ids, the offset of the first context token and the number of
    context tokens kept.
    """
    q = vocab.encode(question)[: max(1, max_len // 2)]
    room = max_len - len(q) - 3
    ctx = vocab.ids(context_tokens)[: max(room, 0)]
    ids = [vocab.cls_id, *q, vocab.sep_id, *ctx, vocab.eos_id]
    return ids, len(q) + 2, len(ctx)


# -- model -----------------------------------------------------------------------------


class MTLModel(nn.Module):
    """Shared encoder with SR, sentence-AR and token-AR heads (hard parameter sharing)."""

    def __init__(self, encoder: LayeredEncoder, seed: int = 0) -> None:
        super().__init__()
        if encoder.vocab is None:
            raise ValueError("encoder needs an attached vocabulary")
        d = encoder.cfg.d_model
        self.encoder = encoder
        self.sr_head = nn.Linear(d, 2, dtype=DTYPE)
        self.ar_sent_head = nn.Linear(d, 2, dtype=DTYPE)
        self.ar_token_head = nn.Linear(d, 2, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for head in (self.sr_head, self.ar_sent_head, self.ar_token_head):
                head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=DTYPE) * encoder.cfg.init_std)
                head.bias.zero_()

    @property
    def vocab(self) -> Vocab:
        return self.encoder.vocab

    @property
    def max_len(self) -> int:
        return self.encoder.cfg.max_len

    def head_parameters(self) -> list[nn.Parameter]:
        return [*self.sr_head.parameters(), *self.ar_sent_head.parameters(), *self.ar_token_head.parameters()]

    def shared_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.encoder.named_parameters() if not n.startswith("lm_head")]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return self.shared_parameters() + self.head_parameters()

    # scoring hooks used by infer(); any object exposing these two methods can stand in
    @torch.no_grad()
    def sr_scores(self, question: str, sections: Sequence[Section]) -> np.ndarray:
        ids = [pack(self.vocab, question, section_tokens(s), self.max_len)[0] for s in sections]
        _, pooled = self.encoder(pad_batch(ids))
        return self.sr_head(pooled).softmax(-1)[:, 1].numpy()

    @torch.no_grad()
    def ar_unit_probs(self, question: str, section: Section, mode: str) -> np.ndarray:
        if mode == "sentence":
            ids = [pack(self.vocab, question, tokenize(s.text), self.max_len)[0] for s in section.sentences]
            _, pooled = self.encoder(pad_batch(ids))
            return self.ar_sent_head(pooled).softmax(-1)[:, 1].numpy()
        toks = section_tokens(section)
        ids, offset, n_t = pack(self.vocab, question, toks, self.max_len)
        hidden, _ = self.encoder(pad_batch([ids]))
        probs = np.zeros(len(toks))
        probs[:n_t] = self.ar_token_head(hidden[0, offset: offset + n_t]).softmax(-1)[:, 1].numpy()
        return probs

    def token_logits(self, question: str, section: Section) -> torch.Tensor:
        """AR token-head logits of shape (n_t, 2) for the kept section tokens."""
        ids, offset, n_t = pack(self.vocab, question, section_tokens(section), self.max_len)
        hidden, _ = self.encoder(pad_batch([ids]))
        return self.ar_token_head(hidden[0, offset: offset + n_t])

    def save(self, prefix, **meta):
        return save_checkpoint(self, prefix, kind="mtl", architecture=asdict(self.encoder.cfg), vocab=self.vocab, meta=meta)

    @classmethod
    def load(cls, prefix) -> "MTLModel":
        manifest = read_manifest(prefix)
        vocab = Vocab(manifest["vocab"][len(SPECIAL_TOKENS):])
        model = cls(LayeredEncoder(EncoderConfig(**manifest["architecture"]), vocab))
        load_state(model, prefix, manifest)
        return model


# -- candidates and targets --------------------------------------------------------------


@dataclass
class Targets:
    sr_labels: list[int]
    ar_labels: list[list[int]]  # per candidate: per sentence (sentence mode) or per token


@dataclass
class TrainExample:
    question: str
    candidates: list[Section]
    targets: Targets


def build_candidates(record: QARecord, index: RetrievalIndex, K: int, train: bool = False) -> list[Section]:
    """Top-K retrieved sections; in training the gold section is appended if missed."""
    if len(index) == 0:
        raise ValueError("retrieval index is empty")
    ranked = top_k(record.question, index, K).section_ids
    cands = [index.section(sid) for sid in ranked]
    if train and record.gold_section_id not in ranked:
        cands.append(index.section(record.gold_section_id))
    return cands


def build_targets(candidates: Sequence[Section], record: QARecord, mode: str) -> Targets:
    if mode not in AR_MODES:
        raise ValueError(f"unknown AR mode {mode!r}")
    if record.gold_section_id not in {c.section_id for c in candidates}:
        raise ValueError(f"record {record.qid!r}: gold section {record.gold_section_id!r} not among candidates")
    answer = set(record.answer_sentence_indices)
    sr, ar = [], []
    for sec in candidates:
        gold = sec.section_id == record.gold_section_id
        sr.append(int(gold))
        if mode == "sentence":
            ar.append([int(gold and s.index in answer) for s in sec.sentences])
        else:
            ar.append([int(gold and s.index in answer) for s in sec.sentences for _ in tokenize(s.text)])
    return Targets(sr_labels=sr, ar_labels=ar)


def make_example(record: QARecord, index: RetrievalIndex, K: int, mode: str, train: bool = True) -> TrainExample:
    cands = build_candidates(record, index, K, train=train)
    return TrainExample(record.question, cands, build_targets(cands, record, mode))


# -- losses --------------------------------------------------------------------------


class StepLosses(NamedTuple):
    sr: torch.Tensor
    ar: torch.Tensor
    mt: torch.Tensor


def _ce(logits: torch.Tensor, labels: Sequence[int], pos_weight: Optional[float]) -> torch.Tensor:
    target = torch.as_tensor(labels, dtype=torch.long)
    weight = None if pos_weight is None else torch.tensor([1.0, pos_weight], dtype=DTYPE)
    return F.cross_entropy(logits, target, weight=weight)


def mtl_losses(
    model: MTLModel,
    examples: Sequence[TrainExample],
    mode: str,
    pos_weight: Optional[float] = None,
    branches: tuple[str, ...] = ("sr", "ar"),
) -> StepLosses:
    """L_SR over (question, section) pairs, L_AR over (question, sentence) pairs or
    over all section tokens, and L_MT = (L_SR + L_AR) / 2.

    A branch left out of ``branches`` contributes a constant zero.
    """
    vocab, max_len = model.vocab, model.max_len
    zero = torch.zeros((), dtype=DTYPE)
    sr_ids, sr_labels, ar_ids, ar_labels = [], [], [], []
    tok_meta = []
    for ex in examples:
        for sec, sr_y, ar_y in zip(ex.candidates, ex.targets.sr_labels, ex.targets.ar_labels):
            ids, offset, n_t = pack(vocab, ex.question, section_tokens(sec), max_len)
            sr_ids.append(ids)
            sr_labels.append(sr_y)
            if mode == "sentence":
                for sent, y in zip(sec.sentences, ar_y):
                    ar_ids.append(pack(vocab, ex.question, tokenize(sent.text), max_len)[0])
                    ar_labels.append(y)
            else:
                tok_meta.append((offset, n_t))
                ar_labels.extend(ar_y[:n_t])

    need_section_pass = "sr" in branches or (mode == "token" and "ar" in branches)
    if need_section_pass:
        hidden, pooled = model.encoder(pad_batch(sr_ids))
    l_sr = _ce(model.sr_head(pooled), sr_labels, None) if "sr" in branches else zero

    if "ar" not in branches:
        l_ar = zero
    elif mode == "sentence":
        _, ar_pooled = model.encoder(pad_batch(ar_ids))
        l_ar = _ce(model.ar_sent_head(ar_pooled), ar_labels, pos_weight)
    else:
        rows = [hidden[i, off: off + n] for i, (off, n) in enumerate(tok_meta)]
        l_ar = _ce(model.ar_token_head(torch.cat(rows)), ar_labels, pos_weight)
    return StepLosses(l_sr, l_ar, (l_sr + l_ar) / 2)


def mtl_step(
    model: MTLModel,
    examples: Sequence[TrainExample],
    mode: str,
    pos_weight: Optional[float] = None,
    objective: str = "mt",
) -> tuple[float, float, float]:
    """Compute the three losses and back-propagate the chosen objective."""
    branches = {"mt": ("sr", "ar"), "sr": ("sr",), "ar": ("ar",)}[objective]
    losses = mtl_losses(model, examples, mode, pos_weight, branches)
    values = tuple(v.item() for v in losses)
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError(
            f"non-finite loss {values} for questions {[ex.question for ex in examples]!r}"
        )
    getattr(losses, objective).backward()
    return values


# -- training ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    ar_mode: str = "sentence"
    K: int = 10
    batch_size: int = 32
    epochs: int = 50
    patience: int = 3
    lr: float = 1e-3
    seed: int = 0
    pos_weight: Optional[float] = None

    def __post_init__(self) -> None:
        if self.ar_mode not in AR_MODES:
            raise ValueError(f"ar_mode must be one of {AR_MODES}")
        if self.K < 1 or self.batch_size < 1 or self.patience < 0:
            raise ValueError("K and batch_size must be >= 1, patience >= 0")


IndexLike = Union[RetrievalIndex, Mapping[str, RetrievalIndex]]


def index_for(indexes: IndexLike, record: QARecord) -> RetrievalIndex:
    if isinstance(indexes, RetrievalIndex):
        return indexes
    try:
        return indexes[record.manual_id]
    except KeyError:
        raise KeyError(f"record {record.qid!r}: no index for manual {record.manual_id!r}") from None


def _examples(records: Sequence[QARecord], indexes: IndexLike, cfg: TrainConfig) -> list[TrainExample]:
    return [make_example(r, index_for(indexes, r), cfg.K, cfg.ar_mode, train=True) for r in records]


@torch.no_grad()
def evaluate_loss(model: MTLModel, examples: Sequence[TrainExample], cfg: TrainConfig, objective: str = "mt") -> float:
    branches = {"mt": ("sr", "ar"), "sr": ("sr",), "ar": ("ar",)}[objective]
    total, n = 0.0, 0
    for s in range(0, len(examples), cfg.batch_size):
        chunk = examples[s: s + cfg.batch_size]
        total += getattr(mtl_losses(model, chunk, cfg.ar_mode, cfg.pos_weight, branches), objective).item() * len(chunk)
        n += len(chunk)
    return total / n


def _fit(
    model: MTLModel,
    train: Sequence[QARecord],
    indexes: IndexLike,
    cfg: TrainConfig,
    val: Optional[Sequence[QARecord]],
    objective: str,
) -> MTLModel:
    if not train:
        raise ValueError("training set is empty")
    train_ex = _examples(train, indexes, cfg)
    val_ex = _examples(val, indexes, cfg) if val else None
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    model.history = []
    best, best_state, bad = math.inf, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_ex))
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_ex[i] for i in order[s: s + cfg.batch_size]]
            opt.zero_grad(set_to_none=True)
            l_sr, l_ar, l_mt = mtl_step(model, batch, cfg.ar_mode, cfg.pos_weight, objective)
            if objective == "mt" and l_mt != (l_sr + l_ar) / 2:
                raise AssertionError(f"L_MT {l_mt} != mean of L_SR {l_sr} and L_AR {l_ar}")
            opt.step()
            model.history.append({"epoch": epoch, "sr": l_sr, "ar": l_ar, "mt": l_mt})
        if val_ex is None:
            continue
        model.eval()
        v = evaluate_loss(model, val_ex, cfg, objective)
        logger.debug("epoch %d validation %s loss %.6f", epoch, objective, v)
        if v < best:
            best, bad = v, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad > cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.epochs_run = epoch + 1
    model.eval()
    return model


def train_mtl(
    model: MTLModel,
    train: Sequence[QARecord],
    indexes: IndexLike,
    cfg: TrainConfig,
    val: Optional[Sequence[QARecord]] = None,
) -> MTLModel:
    """Joint SR+AR training on L_MT with early stopping on validation L_MT."""
    return _fit(model, train, indexes, cfg, val, "mt")


def train_sqp(
    train: Sequence[QARecord],
    indexes: IndexLike,
    cfg: TrainConfig,
    encoder: LayeredEncoder,
    val: Optional[Sequence[QARecord]] = None,
) -> tuple[MTLModel, MTLModel]:
    """Sequential baseline: separate SR and AR models, each with its own copy of ``encoder``."""
    sr_model = _fit(MTLModel(copy.deepcopy(encoder), seed=cfg.seed), train, indexes, cfg, val, "sr")
    ar_model = _fit(MTLModel(copy.deepcopy(encoder), seed=cfg.seed), train, indexes, cfg, val, "ar")
    return sr_model, ar_model


# -- inference --------------------------------------------------------------------------


@dataclass
class InferenceResult:
    predicted_section_id: str
    sr_scores: dict[str, float]
    selected_units: list
    answer_text: str
    mode: str
    unit_probs: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _merge_spans(indices: Sequence[int]) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    for i in indices:
        if spans and spans[-1][1] == i:
            spans[-1] = (spans[-1][0], i + 1)
        else:
            spans.append((i, i + 1))
    return spans


def select_units(probs: Sequence[float], threshold: float) -> list[int]:
    """Indices with probability >= threshold; the single best one if none qualifies."""
    chosen = [i for i, p in enumerate(probs) if p >= threshold]
    if not chosen and len(probs):
        chosen = [int(np.argmax(probs))]
    return chosen


def pick_section(cands: Sequence[Section], probs: np.ndarray) -> int:
    """Index of the highest SR score; ties go to the lower section id."""
    top = np.max(probs)
    return min((i for i in range(len(cands)) if probs[i] == top), key=lambda i: cands[i].section_id)


def infer(
    question: str,
    manual: Optional[Manual],
    index: RetrievalIndex,
    models,
    K: int = 10,
    mode: str = "sentence",
    threshold: float = 0.5,
) -> InferenceResult:
    """Retrieve top K, pick the SR argmax (ties -> lower section id), then mark answer units."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if mode not in AR_MODES:
        raise ValueError(f"unknown AR mode {mode!r}")
    if (manual is not None and not manual.sections) or len(index) == 0:
        raise ValueError("cannot answer from an empty manual")
    sr_model, ar_model = models if isinstance(models, tuple) else (models, models)
    lookup = manual.section if manual is not None else index.section
    cands = [lookup(sid) for sid in top_k(question, index, K).section_ids]
    probs = np.asarray(sr_model.sr_scores(question, cands), dtype=np.float64)
    section = cands[pick_section(cands, probs)]

    unit_probs = np.asarray(ar_model.ar_unit_probs(question, section, mode), dtype=np.float64)
    chosen = select_units(unit_probs, threshold)
    if mode == "sentence":
        units: list = chosen
        answer = assemble_sentences(section, chosen)
    else:
        surface = [t for s in section.sentences for t in surface_tokens(s.text)]
        units = _merge_spans(chosen)
        answer = " ".join(surface[i] for i in chosen)
    return InferenceResult(
        predicted_section_id=section.section_id,
        sr_scores={c.section_id: float(p) for c, p in zip(cands, probs)},
        selected_units=units,
        answer_text=answer,
        mode=mode,
        unit_probs=unit_probs.tolist(),
    )


def sr_accuracy(models, records: Sequence[QARecord], indexes: IndexLike, K: int = 10) -> float:
    """Fraction of records for which SR picks the gold section among the top K."""
    sr_model = models[0] if isinstance(models, tuple) else models
    hits = 0
    for rec in records:
        index = index_for(indexes, rec)
        cands = [index.section(sid) for sid in top_k(rec.question, index, K).section_ids]
        probs = np.asarray(sr_model.sr_scores(rec.question, cands), dtype=np.float64)
        hits += cands[pick_section(cands, probs)].section_id == rec.gold_section_id
    return hits / len(records) if records else 0.0


# -- question paraphrase detection ----------------------------------------------------------


class PairClassifier(nn.Module):
    """Shared-encoder sequence classifier over ``[CLS] q1 [SEP] q2 [EOS]``."""

    def __init__(self, encoder: LayeredEncoder, seed: int = 0) -> None:
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.cfg.d_model, 2, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=gen, dtype=DTYPE) * encoder.cfg.init_std)
            self.head.bias.zero_()

    def logits(self, pairs: Sequence[tuple[str, str]]) -> torch.Tensor:
        vocab, max_len = self.encoder.vocab, self.encoder.cfg.max_len
        ids = [pack(vocab, a, tokenize(b), max_len)[0] for a, b in pairs]
        _, pooled = self.encoder(pad_batch(ids))
        return self.head(pooled)


def train_paraphrase(
    model: PairClassifier,
    pairs: Sequence[tuple[str, str, int]],
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> PairClassifier:
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for s in range(0, len(order), batch_size):
            chunk = [pairs[i] for i in order[s: s + batch_size]]
            opt.zero_grad(set_to_none=True)
            loss = _ce(model.logits([(a, b) for a, b, _ in chunk]), [y for *_, y in chunk], None)
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def paraphrase_detect(q1: str, q2: str, model: PairClassifier) -> tuple[int, float]:
    """(label, positive-class probability); label is 1 iff probability >= 0.5."""
    if not q1.strip() or not q2.strip():
        raise ValueError("paraphrase detection needs two non-empty questions")
    prob = model.logits([(q1, q2)]).softmax(-1)[0, 1].item()
    return int(prob >= 0.5), prob
