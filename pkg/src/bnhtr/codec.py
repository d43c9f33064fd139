"""Uniform text<->ids facade over the three tokenizer kinds.

A ``Codec`` pairs a tokenizer kind tag ("grapheme", "char", "bpe") with its
backing table and exposes one encode/decode surface, plus a text payload
round-trip so checkpoints can embed the exact tokenizer they were trained
with.
"""

from __future__ import annotations

from typing import Iterable

from .bpe import BpeModel, bpe_decode, bpe_encode
from .graphemes import segment, segment_characters
from .tokenizers import N_SPECIAL, SPECIAL_TOKENS, GraphemeVocab, TokenSequence

TOKENIZER_KINDS = ("grapheme", "char", "bpe")

_UNIT_FNS = {"grapheme": segment, "char": segment_characters}


class Codec:
    """One tokenizer behind a fixed encode/decode interface."""

    def __init__(self, kind: str, backend):
        if kind not in TOKENIZER_KINDS:
            raise ValueError(f"unknown tokenizer kind {kind!r}")
        if kind == "bpe" and not isinstance(backend, BpeModel):
            raise TypeError("bpe codec requires a BpeModel")
        if kind != "bpe" and not isinstance(backend, GraphemeVocab):
            raise TypeError(f"{kind} codec requires a GraphemeVocab")
        self.kind = kind
        self.backend = backend

    def __len__(self) -> int:
        return len(self.backend)

    def encode(self, text: str, frame: bool = False) -> TokenSequence:
        if self.kind == "bpe":
            return bpe_encode(text, self.backend, frame=frame)
        return self.backend.encode(text, frame=frame)

    def decode(self, tokens: TokenSequence | Iterable[int]) -> str:
        if self.kind == "bpe":
            return bpe_decode(tokens, self.backend)
        return self.backend.decode(tokens)

    def surface(self, token_id: int) -> str:
        """Printable form of one token id (specials included)."""
        if self.kind != "bpe":
            return self.backend.surface(token_id)
        if not 0 <= token_id < len(self.backend):
            raise ValueError(f"token id {token_id} out of range for V={len(self.backend)}")
        if token_id < N_SPECIAL:
            return SPECIAL_TOKENS[token_id]
        return self.backend.tokens[token_id - N_SPECIAL]

    def to_payload(self) -> dict:
        return {"type": self.kind, "data": self.backend.to_text()}

    @classmethod
    def from_payload(cls, payload: dict) -> "Codec":
        kind = payload.get("type")
        if kind not in TOKENIZER_KINDS:
            raise ValueError(f"unknown tokenizer kind {kind!r}")
        data = payload["data"]
        if kind == "bpe":
            return cls(kind, BpeModel.from_text(data))
        return cls(kind, GraphemeVocab.from_text(data, unit_fn=_UNIT_FNS[kind]))

    @classmethod
    def from_file(cls, kind: str, path) -> "Codec":
        if kind == "bpe":
            return cls(kind, BpeModel.load(path))
        if kind in _UNIT_FNS:
            return cls(kind, GraphemeVocab.load(path, unit_fn=_UNIT_FNS[kind]))
        raise ValueError(f"unknown tokenizer kind {kind!r}")
