"""Answer-quality metrics: exact match, ROUGE-L, sentence+word mover similarity,
plus the PCA nearest-neighbour probe for encoder word representations."""

from __future__ import annotations

import csv
import io
import math
import string
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
from scipy.optimize import linprog

from .corpus import split_sentences
from .retrieval import EmbeddingTable
from .text import tokenize

TokensLike = Union[str, Sequence[str]]

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def exact_match(pred: str, ref: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(ref))


def _tokens(x: TokensLike) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: TokensLike, ref: TokensLike) -> tuple[float, float, float]:
    """ROUGE-L (precision, recall, F1) with beta = 1."""
    p_toks, r_toks = _tokens(pred), _tokens(ref)
    if not p_toks or not r_toks:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(p_toks, r_toks)
    p, r = lcs / len(p_toks), lcs / len(r_toks)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


# -- sentence + word mover similarity --------------------------------------------------


class UnscoreableText(ValueError):
    """Text has no token covered by the embedding table."""


@dataclass(frozen=True)
class Bag:
    points: np.ndarray  # (n, dim)
    masses: np.ndarray  # (n,), positive, sums to 1

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or len(self.points) != len(self.masses):
            raise ValueError("points must be (n, dim) with one mass per point")
        if np.any(self.masses <= 0) or abs(self.masses.sum() - 1.0) > 1e-9:
            raise ValueError("masses must be positive and sum to 1")

    @classmethod
    def normalized(cls, points, masses) -> "Bag":
        masses = np.asarray(masses, dtype=np.float64)
        return cls(np.asarray(points, dtype=np.float64), masses / masses.sum())


def build_swms_bag(text: str, embeddings: EmbeddingTable) -> Bag:
    """Word points weighted by in-text frequency and sentence points (mean word
    vector) weighted by sentence token length, jointly normalized."""
    points, masses = [], []
    word_counts: dict[str, int] = {}
    for sent in split_sentences(text) or [text]:
        toks = tokenize(sent)
        known = [t for t in toks if t in embeddings]
        for t in known:
            word_counts[t] = word_counts.get(t, 0) + 1
        if known:
            points.append(embeddings.mean(known))
            masses.append(len(toks))
    if not word_counts:
        raise UnscoreableText(f"no in-vocabulary tokens in {text[:60]!r}")
    words = sorted(word_counts)
    points = [embeddings.vectors[w] for w in words] + points
    masses = [word_counts[w] for w in words] + masses
    return Bag.normalized(points, masses)


def transport_cost(bag1: Bag, bag2: Bag) -> np.ndarray:
    if bag1.points.shape[1] != bag2.points.shape[1]:
        raise ValueError(f"embedding dimensions differ: {bag1.points.shape[1]} vs {bag2.points.shape[1]}")
    diff = bag1.points[:, None, :] - bag2.points[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def emd(bag1: Bag, bag2: Bag) -> float:
    """Earth mover's distance with Euclidean ground cost (balanced transport LP)."""
    cost = transport_cost(bag1, bag2)
    m, n = cost.shape
    if m == 1:
        return float(cost[0] @ bag2.masses)
    if n == 1:
        return float(cost[:, 0] @ bag1.masses)
    # rows: supply per source point; columns: demand per sink point (last one implied)
    a_eq = np.zeros((m + n - 1, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n - 1):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([bag1.masses, bag2.masses[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def swms(pred: str, ref: str, embeddings: EmbeddingTable) -> float:
    """exp(-EMD) between the sentence+word bags of the two texts."""
    return math.exp(-emd(build_swms_bag(pred, embeddings), build_swms_bag(ref, embeddings)))


# -- nearest neighbours of word representations -----------------------------------------


def pca_project(x: np.ndarray, n_components: int = 3) -> np.ndarray:
    """Project rows onto the top principal axes (eigendecomposition of the covariance)."""
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][: min(n_components, x.shape[1])]
    return xc @ vecs[:, order]


def rank_neighbors(words: Sequence[str], vectors: np.ndarray, k: int) -> dict[str, list[str]]:
    """k nearest other words by cosine distance (ties broken by word order)."""
    if k >= len(words):
        raise ValueError(f"k={k} must be smaller than the number of words ({len(words)})")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)
    dist = 1.0 - unit @ unit.T
    out = {}
    for i, w in enumerate(words):
        others = [j for j in range(len(words)) if j != i]
        others.sort(key=lambda j: (dist[i, j], j))
        out[w] = [words[j] for j in others[:k]]
    return out


@torch.no_grad()
def word_representations(words: Sequence[str], encoder, probes: Sequence[str] = ()) -> np.ndarray:
    """Last-hidden-layer state per word, averaged over its occurrences in ``probes``.

    Words absent from every probe are encoded on their own.
    """
    vocab = encoder.vocab
    missing = [w for w in words if w not in vocab.stoi]
    if missing:
        raise KeyError(f"words not in the encoder vocabulary: {missing}")
    sums = {w: np.zeros(encoder.cfg.d_model) for w in words}
    counts = dict.fromkeys(words, 0)
    wanted = {vocab.stoi[w]: w for w in words}
    for text in probes:
        ids = [vocab.cls_id, *vocab.encode(text)[: encoder.cfg.max_len - 2], vocab.eos_id]
        hidden, _ = encoder(torch.tensor([ids]))
        for pos, tid in enumerate(ids):
            if tid in wanted:
                sums[wanted[tid]] += hidden[0, pos].numpy()
                counts[wanted[tid]] += 1
    rows = []
    for w in words:
        if counts[w] == 0:
            hidden, _ = encoder(torch.tensor([[vocab.cls_id, vocab.stoi[w], vocab.eos_id]]))
            rows.append(hidden[0, 1].numpy())
        else:
            rows.append(sums[w] / counts[w])
    return np.stack(rows)


def nearest_neighbors(words: Sequence[str], encoder, k: int = 5, probes: Sequence[str] = ()) -> dict[str, list[str]]:
    if k >= len(words):
        raise ValueError(f"k={k} must be smaller than the number of words ({len(words)})")
    reps = word_representations(words, encoder, probes)
    return rank_neighbors(words, pca_project(reps, 3), k)


# -- reports -----------------------------------------------------------------------


METRIC_COLUMNS = ("em", "rouge_p", "rouge_r", "rouge_f1", "swms")


def score_pair(pred: str, ref: str, embeddings: Optional[EmbeddingTable]) -> dict[str, float]:
    p, r, f1 = rouge_l(pred, ref)
    row = {"em": float(exact_match(pred, ref)), "rouge_p": p, "rouge_r": r, "rouge_f1": f1}
    if embeddings is not None:
        try:
            row["swms"] = swms(pred, ref, embeddings)
        except UnscoreableText:
            row["swms"] = 0.0
    return row


@dataclass
class MetricReport:
    rows: list[dict]
    n_references: int = 1
    metadata: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        cols = list(METRIC_COLUMNS)
        for j in range(1, self.n_references):
            cols += [f"{c}_ref{j}" for c in METRIC_COLUMNS]
        return cols

    def aggregates(self) -> dict[str, float]:
        agg = {}
        for c in self.columns():
            vals = [r[c] for r in self.rows if r.get(c) is not None]
            agg[c] = sum(vals) / len(vals) if vals else 0.0
        return agg

    def reference_block(self, j: int) -> dict[str, float]:
        agg = self.aggregates()
        suffix = "" if j == 0 else f"_ref{j}"
        return {c: agg[c + suffix] for c in METRIC_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["qid", *self.columns()]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([r["qid"], *("" if r.get(c) is None else f"{r[c]:.6f}" for c in cols[1:])])
        agg = self.aggregates()
        writer.writerow(["mean", *(f"{agg[c]:.6f}" for c in cols[1:])])
        return buf.getvalue()

    def to_markdown(self) -> str:
        header = "| {} | EM | P | R | F1 | S+WMS |\n|---|---|---|---|---|---|\n"
        if self.n_references == 1:
            model = self.metadata.get("model", "model")
            return header.format("MODEL") + markdown_row(model, self.reference_block(0))
        labels = ["AGT"] + ["CGT" if j == 1 else f"CGT{j}" for j in range(1, self.n_references)]
        return header.format("GT") + "".join(markdown_row(lbl, self.reference_block(j)) for j, lbl in enumerate(labels))


def markdown_row(label: str, block: Mapping[str, float]) -> str:
    vals = " | ".join(f"{block[c]:.3f}" for c in METRIC_COLUMNS)
    return f"| {label} | {vals} |\n"


def build_report(
    predictions: Mapping[str, str],
    records: Sequence,
    embeddings: Optional[EmbeddingTable],
    metadata: Optional[dict] = None,
) -> MetricReport:
    """Score each record's prediction against its annotated answer and any extra references."""
    n_refs = max((len(r.references) for r in records), default=1)
    rows = []
    for rec in records:
        pred = predictions.get(rec.qid, "")
        row: dict = {"qid": rec.qid}
        for j in range(n_refs):
            suffix = "" if j == 0 else f"_ref{j}"
            if j < len(rec.references):
                scores = score_pair(pred, rec.references[j], embeddings)
            else:
                scores = {}
            for c in METRIC_COLUMNS:
                row[c + suffix] = scores.get(c)
        rows.append(row)
    return MetricReport(rows=rows, n_references=n_refs, metadata=dict(metadata or {}))
