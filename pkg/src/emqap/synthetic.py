"""Deterministic toy manuals and QA pairs in the on-disk input formats.

Each section describes one device feature with a fixed sentence layout, so
that every question type has a known answer set (including non-contiguous
ones).  Used by the test-suite and by ``emqap toy``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import Manual, RawDocument, segment
from .mtl import QARecord, assemble_sentences
from .text import tokenize

FEATURES = (
    "bluetooth", "wifi", "battery", "screen", "volume", "camera", "alarm",
    "language", "font", "brightness", "storage", "update", "keyboard", "hotspot",
    "notifications", "ringtone", "stopwatch", "calendar", "gallery", "vibration",
    "location", "backup", "fingerprint", "airplane", "tethering", "cast", "timer",
    "flashlight", "contacts", "recorder",
)
DEVICES = ("phone", "tablet", "watch", "television", "remote", "speaker")
BENEFITS = (
    "saves power during long trips", "keeps your data in sync", "helps you stay organised",
    "improves everyday use", "lets you share content quickly", "works with nearby accessories",
)
FILLERS = (
    "Keep the {device} away from water and heat.",
    "Some menus may differ depending on the region.",
    "Contact customer support if the problem persists.",
    "Read the safety information before first use.",
)

# answer sentence indices by question kind; sentence layout below
KINDS = {
    "what": ("factual", (0,)),
    "on": ("procedural", (1,)),
    "off": ("procedural", (3,)),
    "where": ("location", (4,)),
    "onoff": ("procedural", (1, 3)),
}
QUESTIONS = {
    "what": ("what is {f} on the {d}?", "what does the {f} feature do?"),
    "on": ("how do i enable {f}?", "how can i switch on {f}?"),
    "off": ("how do i disable {f}?", "how can i switch off {f}?"),
    "where": ("where is the {f} icon?", "where can i find {f}?"),
    "onoff": ("how do i enable and disable {f}?", "how can i switch {f} on and off?"),
}


def _section_sentences(feature: str, device: str, rng: np.random.Generator) -> list[str]:
    filler = FILLERS[int(rng.integers(len(FILLERS)))].format(device=device)
    benefit = BENEFITS[int(rng.integers(len(BENEFITS)))]
    return [
        f"The {feature} feature {benefit}.",
        f"To enable {feature}, open Settings and tap {feature}.",
        filler,
        f"To disable {feature}, tap the {feature} switch again.",
        f"The {feature} icon appears in the status bar at the top.",
    ]


def make_raw_manuals(n_manuals: int = 3, sections_per_manual: int = 6, seed: int = 0) -> list[RawDocument]:
    rng = np.random.default_rng(seed)
    docs = []
    for m in range(n_manuals):
        device = DEVICES[m % len(DEVICES)]
        feats = [FEATURES[(m * sections_per_manual + i) % len(FEATURES)] for i in range(sections_per_manual)]
        toc = "Contents\n" + "\n".join(f"{f.title()} {3 + 2 * i}" for i, f in enumerate(feats))
        blocks = [toc]
        for f in feats:
            blocks.append(f.upper())
            sents = _section_sentences(f, device, rng)
            blocks += [" ".join(sents[:3]), " ".join(sents[3:])]
        docs.append(RawDocument(doc_id=f"manual{m}", blocks=tuple(blocks)))
    return docs


def make_records(
    manuals: list[Manual],
    n_records: int,
    seed: int = 0,
    kinds: tuple[str, ...] = tuple(KINDS),
    paraphrase_rate: float = 0.3,
    forum_references: bool = False,
) -> list[QARecord]:
    """One question per (section, kind) slot; some also get a paraphrase in the same group."""
    rng = np.random.default_rng(seed)
    flat = [(m, sec) for m in range(len(manuals)) for sec in manuals[m].sections]
    records: list[QARecord] = []
    i = 0
    while len(records) < n_records:
        # walk the sections repeatedly, shifting the question kind on every pass
        m, sec = flat[i % len(flat)]
        kind = kinds[(i + i // len(flat)) % len(kinds)]
        i += 1
        man = manuals[m]
        feature = sec.title.lower()
        device = DEVICES[m % len(DEVICES)]
        qtype, answer = KINDS[kind]
        group = f"g{len(records):03d}"
        texts = [QUESTIONS[kind][0]]
        if rng.random() < paraphrase_rate and len(records) + 1 < n_records:
            texts.append(QUESTIONS[kind][1])
        for t in texts:
            extra = ()
            if forum_references:
                extra = (f"I think you go to settings and look for {feature}.",)
            records.append(
                QARecord(
                    qid=f"q{len(records):03d}",
                    question=t.format(f=feature, d=device),
                    qtype=qtype,
                    paraphrase_group=group,
                    manual_id=man.manual_id,
                    gold_section_id=sec.section_id,
                    answer_sentence_indices=answer,
                    answer_text=assemble_sentences(sec, answer),
                    extra_references=extra,
                )
            )
    return records[:n_records]


def make_fixture(n_manuals: int = 3, sections_per_manual: int = 6, n_records: int = 30, seed: int = 0, **kw):
    raw = make_raw_manuals(n_manuals, sections_per_manual, seed)
    manuals = [segment(d) for d in raw]
    return raw, manuals, make_records(manuals, n_records, seed, **kw)


def write_fixture(out_dir: str | Path, seed: int = 0, n_manuals: int = 3, n_records: int = 30,
                  embeddings_dim: Optional[int] = 16) -> dict[str, Path]:
    """Write corpus.jsonl, qa.jsonl (and a random GloVe-style embeddings.txt)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw, manuals, records = make_fixture(n_manuals=n_manuals, n_records=n_records, seed=seed)
    paths = {"corpus": out / "corpus.jsonl", "qa": out / "qa.jsonl"}
    with open(paths["corpus"], "w") as fh:
        for d in raw:
            fh.write(json.dumps({"manual_id": d.doc_id, "blocks": list(d.blocks)}) + "\n")
    with open(paths["qa"], "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    if embeddings_dim:
        rng = np.random.default_rng(seed)
        words = sorted({t for m in manuals for s in m.sections for t in tokenize(s.full_text)}
                       | {t for r in records for t in tokenize(r.question)})
        paths["embeddings"] = out / "embeddings.txt"
        with open(paths["embeddings"], "w") as fh:
            for w in words:
                fh.write(w + " " + " ".join(f"{x:.6f}" for x in rng.normal(size=embeddings_dim)) + "\n")
    return paths
