"""Text canonicalization shared by the toy backends and the rule judge."""

from __future__ import annotations

import hashlib
import re

STOPWORDS = frozenset(
    """
    a an the and or but of on in at to for from by with without into onto over under
    is are was were be been being am do does did has have had having
    this that these those it its it's there their they them he she his her him
    i me my we our you your as than then so such very too also just
    how what which who whom why when where while about around through
    some any each every all both few more most other another up down out off
    can could will would shall should may might must not no nor
    """.split()
)

_TOKEN = re.compile(r"[a-z0-9]+")


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace."""
    return " ".join(text.lower().split())


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    """Tokens with stopwords removed; falls back to all tokens if nothing is left."""
    toks = tokens(text)
    content = [t for t in toks if t not in STOPWORDS]
    return content or toks


def stable_hash(*parts: object, nbytes: int = 8) -> int:
    """Process-independent integer hash (``hash()`` is salted per interpreter)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:nbytes], "big")


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a child seed from a global seed and a path of names."""
    return stable_hash("seed", int(seed), *parts, nbytes=4)
