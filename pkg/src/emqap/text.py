"""Low-level text helpers shared by ingestion, retrieval and the encoder."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [tok.lower() for tok in _TOKEN_RE.findall(text)]


def surface_tokens(text: str) -> list[str]:
    """Same segmentation as :func:`tokenize` but keeps the original casing."""
    return _TOKEN_RE.findall(text)
