"""Manual ingestion: cleaning, heading/TOC detection, sentence segmentation, corpus statistics.

Input is block text already extracted from the PDFs, one JSON object per manual::

    {"manual_id": "tv-remote", "blocks": ["INTRODUCTION", "Press the power key. ..."]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .text import tokenize

__all__ = [
    "RawDocument",
    "Sentence",
    "Section",
    "Manual",
    "CorpusStats",
    "EmptyManualError",
    "DEFAULT_ABBREVIATIONS",
    "clean_text",
    "split_sentences",
    "is_heading",
    "is_toc_block",
    "segment",
    "corpus_stats",
    "read_raw_documents",
    "write_manuals",
    "read_manuals",
    "stats_csv",
]

DEFAULT_ABBREVIATIONS: tuple[str, ...] = (
    "e.g.", "i.e.", "etc.", "vs.", "approx.", "fig.", "figs.", "no.", "nos.",
    "mr.", "mrs.", "ms.", "dr.", "st.", "min.", "max.", "ref.", "vol.", "ch.",
    "sec.", "pg.", "p.", "pp.", "inc.", "ltd.", "co.", "jan.", "feb.", "aug.",
    "sept.", "oct.", "nov.", "dec.",
)

_TERMINALS = (".", "?", "!")
_BOUNDARY_RE = re.compile(r"[.?!]+(?=\s|$)")
_ENUMERATOR_RE = re.compile(r"^\(?\d{1,3}[.)]?$")
_PAGE_NUMBER_RE = re.compile(r"(?:\s|\.)\d{1,4}$")


class EmptyManualError(ValueError):
    """Raised when a document has no usable text left after filtering."""


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    blocks: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError(f"manual {self.doc_id!r} has no blocks")


@dataclass(frozen=True)
class Sentence:
    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class Section:
    section_id: str
    title: str
    sentences: tuple[Sentence, ...]

    @property
    def text(self) -> str:
        return " ".join(s.text for s in self.sentences)

    @property
    def full_text(self) -> str:
        """Title and body, the string that gets indexed."""
        return f"{self.title} {self.text}".strip()

    @classmethod
    def from_texts(cls, section_id: str, title: str, sentences: Sequence[str]) -> "Section":
        return cls(
            section_id=section_id,
            title=title,
            sentences=tuple(
                Sentence(index=i, text=t, token_count=len(tokenize(t)))
                for i, t in enumerate(sentences)
            ),
        )


@dataclass(frozen=True)
class Manual:
    manual_id: str
    sections: tuple[Section, ...]

    def __post_init__(self) -> None:
        ids = [s.section_id for s in self.sections]
        if len(ids) != len(set(ids)):
            raise ValueError(f"manual {self.manual_id!r} has duplicate section ids")

    def section(self, section_id: str) -> Section:
        for sec in self.sections:
            if sec.section_id == section_id:
                return sec
        raise KeyError(f"section {section_id!r} not in manual {self.manual_id!r}")


@dataclass(frozen=True)
class CorpusStats:
    n_manuals: int = 0
    n_paragraphs: int = 0
    n_sentences: int = 0
    total_words: int = 0
    sentences_per_paragraph: float = 0.0
    words_per_sentence: float = 0.0

    def __add__(self, other: "CorpusStats") -> "CorpusStats":
        return _stats_from_totals(
            self.n_manuals + other.n_manuals,
            self.n_paragraphs + other.n_paragraphs,
            self.n_sentences + other.n_sentences,
            self.total_words + other.total_words,
        )


def clean_text(raw: str) -> str:
    """Keep printable ASCII and newlines, collapse spaces within each line."""
    if not raw:
        return ""
    raw = raw.replace("\r\n", "\n").replace("\r", "\n")
    kept = []
    for ch in raw:
        if ch == "\n":
            kept.append(ch)
        elif ch.isspace():
            kept.append(" ")
        elif " " <= ch <= "~":
            kept.append(ch)
    lines = (re.sub(" +", " ", line).strip() for line in "".join(kept).split("\n"))
    return "\n".join(lines).strip()


def _protected(fragment: str, abbreviations: frozenset[str]) -> bool:
    """True if the terminator ending ``fragment`` must not close a sentence."""
    last = fragment.rsplit(None, 1)[-1] if fragment.strip() else ""
    return last.lower() in abbreviations or bool(_ENUMERATOR_RE.match(last))


def split_sentences(
    text: str, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS
) -> list[str]:
    """Rule-based splitter on ``.?!`` and newlines.

    Decimal numbers never match because the terminator must be followed by
    whitespace.  Abbreviations and list enumerators ("1.") are protected.
    Fragments without any token are glued onto a neighbour.
    """
    abbrevs = frozenset(a.lower() for a in abbreviations)
    pieces: list[str] = []
    for line in text.split("\n"):
        start = 0
        for m in _BOUNDARY_RE.finditer(line):
            if _protected(line[start:m.end()], abbrevs):
                continue
            pieces.append(line[start:m.end()].strip())
            start = m.end()
        pieces.append(line[start:].strip())

    sentences: list[str] = []
    pending = ""
    for piece in pieces:
        if not piece:
            continue
        if not tokenize(piece):
            if sentences:
                sentences[-1] = f"{sentences[-1]} {piece}"
            else:
                pending = f"{pending} {piece}".strip()
            continue
        if pending:
            piece = f"{pending} {piece}"
            pending = ""
        sentences.append(piece)
    return sentences


def is_heading(block: str, max_tokens: int = 8) -> bool:
    """Short block that is all-caps or lacks terminal punctuation."""
    tokens = tokenize(block)
    if not tokens or len(tokens) > max_tokens:
        return False
    letters = [c for c in block if c.isalpha()]
    all_caps = bool(letters) and all(c.isupper() for c in letters)
    return all_caps or not block.rstrip().endswith(_TERMINALS)


def is_toc_block(block: str) -> bool:
    """More than half of the non-empty lines end in a page number."""
    lines = [ln for ln in block.split("\n") if ln.strip()]
    if not lines:
        return False
    hits = sum(1 for ln in lines if _PAGE_NUMBER_RE.search(ln))
    return hits / len(lines) > 0.5


def segment(
    doc: RawDocument,
    toc_filter: bool = True,
    abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS,
) -> Manual:
    """Group blocks into titled sections and split their text into sentences.

    A heading closes the running section and opens a new one.  Body text
    before the first heading goes into an untitled section.  Sections that
    end up without sentences are dropped.
    """
    abbrevs = tuple(abbreviations)
    blocks = [clean_text(b) for b in doc.blocks]
    blocks = [b for b in blocks if b]
    if toc_filter:
        blocks = [b for b in blocks if not is_toc_block(b)]
    if not blocks:
        raise EmptyManualError(f"manual {doc.doc_id!r} has no retained blocks")

    groups: list[tuple[str, list[str]]] = [("", [])]
    for block in blocks:
        if is_heading(block):
            groups.append((block.replace("\n", " "), []))
        else:
            groups[-1][1].extend(split_sentences(block, abbrevs))

    sections = []
    for title, sents in groups:
        if sents:
            sid = f"{doc.doc_id}-s{len(sections):03d}"
            sections.append(Section.from_texts(sid, title, sents))
    if not sections:
        raise EmptyManualError(f"manual {doc.doc_id!r} has headings but no body text")
    return Manual(manual_id=doc.doc_id, sections=tuple(sections))


def _stats_from_totals(n_manuals: int, n_paragraphs: int, n_sentences: int, n_words: int) -> CorpusStats:
    return CorpusStats(
        n_manuals=n_manuals,
        n_paragraphs=n_paragraphs,
        n_sentences=n_sentences,
        total_words=n_words,
        sentences_per_paragraph=n_sentences / n_paragraphs if n_paragraphs else 0.0,
        words_per_sentence=n_words / n_sentences if n_sentences else 0.0,
    )


def corpus_stats(manuals: Sequence[Manual]) -> CorpusStats:
    # every retained section is one contiguous run of body blocks, i.e. one paragraph
    n_par = n_sent = n_words = 0
    for manual in manuals:
        for sec in manual.sections:
            n_par += 1
            n_sent += len(sec.sentences)
            n_words += sum(s.token_count for s in sec.sentences)
    return _stats_from_totals(len(manuals), n_par, n_sent, n_words)


def stats_csv(stats: CorpusStats) -> str:
    rows = [
        ("No. of E-Manuals", f"{stats.n_manuals}"),
        ("No. of paragraphs", f"{stats.n_paragraphs}"),
        ("No. of sentences per paragraph", f"{stats.sentences_per_paragraph:.1f}"),
        ("No. of words per sentence", f"{stats.words_per_sentence:.1f}"),
        ("Total number of words", f"{stats.total_words}"),
    ]
    return "property,value\n" + "".join(f"{k},{v}\n" for k, v in rows)


# -- JSONL IO -----------------------------------------------------------------


def read_raw_documents(path: str | Path) -> Iterator[RawDocument]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                yield RawDocument(doc_id=str(obj["manual_id"]), blocks=obj["blocks"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manual record ({exc})") from exc


def section_to_dict(sec: Section) -> dict:
    return {
        "section_id": sec.section_id,
        "title": sec.title,
        "sentences": [s.text for s in sec.sentences],
    }


def section_from_dict(obj: dict) -> Section:
    return Section.from_texts(obj["section_id"], obj.get("title", ""), obj["sentences"])


def manual_to_dict(manual: Manual) -> dict:
    return {
        "manual_id": manual.manual_id,
        "sections": [section_to_dict(sec) for sec in manual.sections],
    }


def manual_from_dict(obj: dict) -> Manual:
    return Manual(
        manual_id=obj["manual_id"],
        sections=tuple(section_from_dict(s) for s in obj["sections"]),
    )


def write_manuals(manuals: Iterable[Manual], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in manuals:
            fh.write(json.dumps(manual_to_dict(m)) + "\n")


def read_manuals(path: str | Path) -> list[Manual]:
    with open(path, encoding="utf-8") as fh:
        return [manual_from_dict(json.loads(line)) for line in fh if line.strip()]
