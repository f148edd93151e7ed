"""Tokenizers that report character offsets, which span mapping relies on."""

from __future__ import annotations

import re
import zlib
from typing import Protocol

# Chat markers like <|im_start|> stay whole; otherwise whitespace runs, words
# and single punctuation characters.
_PIECE = re.compile(r"<\|[^|<>\s]*\|>|\s+|\w+|[^\w\s]")


class Tokenizer(Protocol):
    vocab_size: int

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[tuple[int, int]]]: ...

    def decode(self, ids: list[int]) -> str: ...


class RegexTokenizer:
    """Deterministic word-piece tokenizer over a small hashed vocabulary.

    Ids below ``reserved`` never come out of encoding; the tiny model uses them
    as its designated output tokens.
    """

    def __init__(self, vocab_size: int = 64, reserved: int = 4):
        if reserved >= vocab_size:
            raise ValueError("reserved ids exhaust the vocabulary")
        self.vocab_size = vocab_size
        self.reserved = reserved
        self._last_pieces: dict[int, str] = {}

    def piece_id(self, piece: str) -> int:
        return self.reserved + zlib.crc32(piece.encode("utf-8")) % (self.vocab_size - self.reserved)

    def encode_with_offsets(self, text: str):
        ids, offsets = [], []
        for m in _PIECE.finditer(text):
            ids.append(self.piece_id(m.group()))
            offsets.append((m.start(), m.end()))
            self._last_pieces.setdefault(ids[-1], m.group())
        return ids, offsets

    def pieces(self, text: str) -> list[str]:
        return [m.group() for m in _PIECE.finditer(text)]

    def decode(self, ids):
        # Hashing is lossy; decoding is best effort and only used for display.
        return "".join(self._last_pieces.get(i, f"<{i}>") for i in ids)


class HFTokenizer:
    """Wraps a fast Hugging Face tokenizer; special tokens are matched as text."""

    def __init__(self, tok):
        self.tok = tok
        self.vocab_size = len(tok)

    @classmethod
    def from_pretrained(cls, name: str, **kw) -> "HFTokenizer":
        from transformers import AutoTokenizer

        return cls(AutoTokenizer.from_pretrained(name, **kw))

    def encode_with_offsets(self, text: str):
        enc = self.tok(text, add_special_tokens=False, return_offsets_mapping=True)
        return list(enc["input_ids"]), [tuple(o) for o in enc["offset_mapping"]]

    def decode(self, ids):
        return self.tok.decode(ids, skip_special_tokens=False, clean_up_tokenization_spaces=False)


def tokenizer_for(spec: dict) -> Tokenizer:
    kind = spec.get("kind", "regex")
    if kind == "regex":
        return RegexTokenizer(spec.get("vocab_size", 64), spec.get("reserved", 4))
    if kind == "hf":
        return HFTokenizer.from_pretrained(spec["name"])
    raise ValueError(f"unknown tokenizer kind {kind!r}")
