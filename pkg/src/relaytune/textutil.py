"""Tokenization helpers shared by dataset statistics, curation, and the mock stack."""

from __future__ import annotations

import hashlib
import random
import re
from typing import Callable

# Words, numbers, or single punctuation marks; whitespace never survives.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

TokenCounter = Callable[[str], int]


def tokenize(text: str) -> list[str]:
    """Split on whitespace and punctuation boundaries (default policy)."""
    return _TOKEN_RE.findall(text)


def count_tokens(text: str) -> int:
    return len(_TOKEN_RE.findall(text))


def stable_digest(*parts: object, size: int = 16) -> str:
    """Hex digest of the given parts, stable across processes and platforms."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:size]


def stable_seed(*parts: object) -> int:
    """Derive a 63-bit RNG seed from arbitrary parts (Python ``hash`` is not stable)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") >> 1


_WORDS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu amber basalt cedar dune ember fjord"
).split()


def pseudo_text(seed: int, n_words: int) -> str:
    """Deterministic filler prose used by the offline mock providers."""
    rng = random.Random(seed)
    return " ".join(rng.choice(_WORDS) for _ in range(max(1, n_words)))
