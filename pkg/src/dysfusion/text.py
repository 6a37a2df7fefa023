"""Character tokenization of keyword prompts (a=0 ... z=25, pad=26)."""

from __future__ import annotations

import re

import numpy as np

VOCAB_SIZE = 26
PAD_ID = 26

_NON_ALPHA = re.compile(r"[^a-z]")


class TokenizeError(ValueError):
    pass


def normalize_word(raw: str) -> str:
    word = _NON_ALPHA.sub("", raw.lower())
    if not word:
        raise TokenizeError(f"{raw!r} has no alphabetic characters")
    return word


def tokenize(word: str) -> list[int]:
    if not word or _NON_ALPHA.search(word):
        raise TokenizeError(f"{word!r} is not a normalized word; call normalize_word first")
    return [ord(c) - ord("a") for c in word]


def detokenize(tokens) -> str:
    return "".join(chr(ord("a") + int(t)) for t in tokens if t != PAD_ID)


def pad_tokens(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence with ``PAD_ID``; returns (ids, mask)."""
    if not sequences:
        raise TokenizeError("empty batch")
    longest = max(len(s) for s in sequences)
    ids = np.full((len(sequences), longest), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), longest), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
    return ids, mask
