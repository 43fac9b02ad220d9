"""Unsupervised section retrieval.

Scores every section of a manual against a question and keeps the K best.
Four scorers are available (TF-IDF cosine, Jaccard over token sets, raw
count-vector cosine, averaged word-embedding cosine).  Sections may be
expanded with generated questions before indexing, which re-weights the
terms those questions share with the section.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .corpus import Section, section_from_dict, section_to_dict
from .text import tokenize

__all__ = [
    "METHODS",
    "STOPWORDS",
    "EmbeddingTable",
    "RetrievalIndex",
    "RankedList",
    "QuestionGenerator",
    "TemplateQuestionGenerator",
    "tokenize",
    "generate_questions",
    "expand_section",
    "build_index",
    "score",
    "top_k",
    "rank_of",
    "hits_at_k",
    "load_embeddings",
    "save_index",
    "load_index",
]

METHODS = ("tfidf", "jaccard", "countvec", "avg_embedding")

# Only used when an index is built with remove_stopwords=True and for picking
# content terms in the template question generator.
STOPWORDS = frozenset(
    """a about above after again all also am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers him his how i if
    in into is it its just me more most my no nor not now of off on once only or
    other our out over own same she should so some such than that the their them
    then there these they this those through to too under until up very was we were
    what when where which while who whom why will with would you your""".split()
)


class QuestionGenerator(Protocol):
    def __call__(self, section: Section, m: int) -> list[str]: ...


@dataclass(frozen=True)
class EmbeddingTable:
    dimension: int
    vectors: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise ValueError("embedding dimension must be positive")
        for tok, vec in self.vectors.items():
            if np.shape(vec) != (self.dimension,):
                raise ValueError(f"embedding for {tok!r} has shape {np.shape(vec)}, expected ({self.dimension},)")

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def mean(self, tokens: Iterable[str]) -> np.ndarray:
        """Unweighted mean of in-vocabulary vectors (zero vector if none)."""
        rows = [self.vectors[t] for t in tokens if t in self.vectors]
        if not rows:
            return np.zeros(self.dimension)
        return np.mean(np.asarray(rows, dtype=np.float64), axis=0)


def load_embeddings(path: str | Path) -> EmbeddingTable:
    """Read a GloVe-style text file: ``token v1 v2 ... vd`` per line."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split()
            if not parts:
                continue
            vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} components, got {vec.size}")
            vectors[parts[0]] = vec
    if dim is None:
        raise ValueError(f"{path}: empty embedding file")
    return EmbeddingTable(dimension=dim, vectors=vectors)


@dataclass(frozen=True)
class RankedList:
    entries: tuple[tuple[str, float], ...]

    @property
    def section_ids(self) -> list[str]:
        return [sid for sid, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class RetrievalIndex:
    method: str
    vocabulary: dict[str, int]
    section_ids: list[str]
    section_vectors: np.ndarray
    idf: Optional[np.ndarray] = None
    expanded: bool = False
    K_default: int = 10
    remove_stopwords: bool = False
    embeddings: Optional[EmbeddingTable] = None
    sections: tuple[Section, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.section_ids)

    def section(self, section_id: str) -> Section:
        for sec in self.sections:
            if sec.section_id == section_id:
                return sec
        raise KeyError(section_id)

    def terms(self, text: str) -> list[str]:
        toks = tokenize(text)
        if self.remove_stopwords:
            toks = [t for t in toks if t not in STOPWORDS]
        return toks


# -- question generation / expansion -----------------------------------------


def _top_terms(section: Section, idf: Optional[Mapping[str, float]], n: int) -> list[str]:
    counts = Counter(t for t in tokenize(section.text) if t not in STOPWORDS and not t.isdigit())
    if not counts:
        return []
    default_idf = max(idf.values()) if idf else 1.0
    weights = {t: c * (idf.get(t, default_idf) if idf else 1.0) for t, c in counts.items()}
    return sorted(weights, key=lambda t: (-weights[t], t))[:n]


def generate_questions(section: Section, m: int, idf: Optional[Mapping[str, float]] = None) -> list[str]:
    """Template questions: "what is <title>?", "how to <title>?", then
    "how do i <term>?" for the section's highest-weighted content terms."""
    if m < 1:
        raise ValueError("m must be >= 1")
    questions = []
    title = " ".join(tokenize(section.title))
    if title:
        questions += [f"what is {title}?", f"how to {title}?"]
    questions += [f"how do i {t}?" for t in _top_terms(section, idf, m)]
    return questions[:m]


class TemplateQuestionGenerator:
    """Default generator; fitting on the manual's sections enables IDF term weights."""

    def __init__(self, sections: Sequence[Section] = ()) -> None:
        self.idf: Optional[dict[str, float]] = None
        if sections:
            n = len(sections)
            df = Counter(t for sec in sections for t in set(tokenize(sec.full_text)))
            self.idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in df.items()}

    def __call__(self, section: Section, m: int) -> list[str]:
        return generate_questions(section, m, self.idf)


def expand_section(section: Section, qgen: QuestionGenerator, m: int) -> str:
    questions = qgen(section, m) if m > 0 else []
    return " ".join([section.full_text, *questions]) if questions else section.full_text


# -- index construction and scoring ----------------------------------------------


def _vectorize_counts(token_lists: Sequence[Sequence[str]], vocabulary: Mapping[str, int]) -> np.ndarray:
    mat = np.zeros((len(token_lists), len(vocabulary)), dtype=np.float64)
    for i, toks in enumerate(token_lists):
        for tok, c in Counter(toks).items():
            j = vocabulary.get(tok)
            if j is not None:
                mat[i, j] = c
    return mat


def _l2_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def build_index(
    sections: Sequence[Section],
    method: str = "tfidf",
    embeddings: Optional[EmbeddingTable] = None,
    expansion: Optional[QuestionGenerator] = None,
    m: int = 3,
    K_default: int = 10,
    remove_stopwords: bool = False,
) -> RetrievalIndex:
    """Index sections (title + body, plus generated questions when ``expansion`` is given)."""
    if method not in METHODS:
        raise ValueError(f"unknown retrieval method {method!r}; expected one of {METHODS}")
    if not sections:
        raise ValueError("cannot build an index over an empty section list")
    if method == "avg_embedding" and embeddings is None:
        raise ValueError("method 'avg_embedding' requires an embedding table")
    ids = [s.section_id for s in sections]
    if len(set(ids)) != len(ids):
        raise ValueError("section ids must be unique within an index")

    index = RetrievalIndex(
        method=method,
        vocabulary={},
        section_ids=ids,
        section_vectors=np.zeros((0, 0)),
        expanded=expansion is not None,
        K_default=K_default,
        remove_stopwords=remove_stopwords,
        embeddings=embeddings if method == "avg_embedding" else None,
        sections=tuple(sections),
    )
    texts = [expand_section(s, expansion, m) if expansion else s.full_text for s in sections]
    token_lists = [index.terms(t) for t in texts]
    index.vocabulary = {tok: i for i, tok in enumerate(sorted({t for toks in token_lists for t in toks}))}

    if method == "avg_embedding":
        index.section_vectors = np.stack([embeddings.mean(toks) for toks in token_lists])
        return index

    counts = _vectorize_counts(token_lists, index.vocabulary)
    if method == "tfidf":
        n = len(sections)
        df = (counts > 0).sum(axis=0)
        index.idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        index.section_vectors = _l2_normalize(counts * index.idf)
    elif method == "countvec":
        index.section_vectors = _l2_normalize(counts)
    else:  # jaccard keeps token-set membership
        index.section_vectors = (counts > 0).astype(np.float64)
    return index


def _scores_array(question: str, index: RetrievalIndex) -> np.ndarray:
    toks = index.terms(question)
    if index.method == "jaccard":
        qset = set(toks)
        in_vocab = [index.vocabulary[t] for t in qset if t in index.vocabulary]
        inter = index.section_vectors[:, in_vocab].sum(axis=1)
        union = index.section_vectors.sum(axis=1) + len(qset) - inter
        return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    if index.method == "avg_embedding":
        q = index.embeddings.mean(toks)
        qn = np.linalg.norm(q)
        if qn == 0:
            return np.zeros(len(index))
        return _l2_normalize(index.section_vectors) @ (q / qn)
    q = _vectorize_counts([toks], index.vocabulary)[0]
    if index.method == "tfidf":
        q = q * index.idf
    qn = np.linalg.norm(q)
    if qn == 0:
        return np.zeros(len(index))
    return index.section_vectors @ (q / qn)


def score(question: str, index: RetrievalIndex) -> dict[str, float]:
    return dict(zip(index.section_ids, _scores_array(question, index).tolist()))


def _ranking(question: str, index: RetrievalIndex) -> list[tuple[str, float]]:
    scores = _scores_array(question, index).tolist()
    return sorted(zip(index.section_ids, scores), key=lambda e: (-e[1], e[0]))


def top_k(question: str, index: RetrievalIndex, K: Optional[int] = None) -> RankedList:
    K = index.K_default if K is None else K
    if K < 1:
        raise ValueError("K must be >= 1")
    return RankedList(entries=tuple(_ranking(question, index)[:K]))


def rank_of(question: str, section_id: str, index: RetrievalIndex) -> int:
    """1-based position of ``section_id`` in the full ranking."""
    for pos, (sid, _) in enumerate(_ranking(question, index), 1):
        if sid == section_id:
            return pos
    raise KeyError(section_id)


def hits_at_k(records: Sequence, index: RetrievalIndex, Ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of records whose gold section is among the top K, for each K."""
    known = set(index.section_ids)
    ranks = []
    for rec in records:
        if rec.gold_section_id not in known:
            raise KeyError(f"record {rec.qid!r}: gold section {rec.gold_section_id!r} is not in the index")
        ranks.append(rank_of(rec.question, rec.gold_section_id, index))
    if not ranks:
        return {k: 0.0 for k in Ks}
    return {k: sum(r <= k for r in ranks) / len(ranks) for k in Ks}


# -- persistence -------------------------------------------------------------------
#
# <prefix>.json  manifest (method, K_default, vocabulary, idf, section ids, sections, layout)
# <prefix>.bin   float64 little-endian, C order: section matrix (n_sections x dim), then
#                for avg_embedding the embedding rows (n_embeddings x embedding_dim) in
#                the order of manifest["embedding_tokens"].


def save_index(index: RetrievalIndex, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "method": index.method,
        "K_default": index.K_default,
        "vocab_size": len(index.vocabulary),
        "expanded": index.expanded,
        "remove_stopwords": index.remove_stopwords,
        "dtype": "<f8",
        "n_sections": len(index),
        "dim": int(index.section_vectors.shape[1]),
        "vocabulary": sorted(index.vocabulary, key=index.vocabulary.__getitem__),
        "idf": None if index.idf is None else index.idf.tolist(),
        "section_ids": list(index.section_ids),
        "sections": [section_to_dict(s) for s in index.sections],
    }
    blobs = [np.ascontiguousarray(index.section_vectors, dtype="<f8").tobytes()]
    if index.embeddings is not None:
        toks = sorted(index.embeddings.vectors)
        manifest["embedding_tokens"] = toks
        manifest["embedding_dim"] = index.embeddings.dimension
        emb = np.stack([index.embeddings.vectors[t] for t in toks]).astype("<f8")
        blobs.append(emb.tobytes())
    json_path, bin_path = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest))
    bin_path.write_bytes(b"".join(blobs))
    return json_path, bin_path


def load_index(prefix: str | Path) -> RetrievalIndex:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    n, dim = manifest["n_sections"], manifest["dim"]
    vectors = raw[: n * dim].reshape(n, dim).astype(np.float64)
    embeddings = None
    if "embedding_tokens" in manifest:
        toks, edim = manifest["embedding_tokens"], manifest["embedding_dim"]
        emb = raw[n * dim:].reshape(len(toks), edim).astype(np.float64)
        embeddings = EmbeddingTable(dimension=edim, vectors=dict(zip(toks, emb)))
    sections = tuple(section_from_dict(s) for s in manifest["sections"])
    return RetrievalIndex(
        method=manifest["method"],
        vocabulary={t: i for i, t in enumerate(manifest["vocabulary"])},
        section_ids=manifest["section_ids"],
        section_vectors=vectors,
        idf=None if manifest["idf"] is None else np.asarray(manifest["idf"]),
        expanded=manifest["expanded"],
        K_default=manifest["K_default"],
        remove_stopwords=manifest["remove_stopwords"],
        embeddings=embeddings,
        sections=sections,
    )
