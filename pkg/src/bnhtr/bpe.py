"""Codepoint-level byte-pair-encoding baseline tokenizer.

Training counts adjacent symbol pairs inside whitespace-delimited words (no
cross-word merges) and repeatedly merges the most frequent pair, breaking
ties lexicographically, until the vocabulary reaches the target size or no
pair occurs twice. Codepoints, not bytes, are the base symbols so that token
boundaries stay comparable with grapheme clusters.

Token ids: 4 specials, then the base alphabet in codepoint order, then one
token per merge in training order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tokenizers import (
    BOS_ID,
    EOS_ID,
    N_SPECIAL,
    UNK_ID,
    UNK_SURFACE,
    TokenSequence,
)

_FILE_HEADER = "bpe v1"


class BpeFileError(ValueError):
    """Raised for malformed BPE model files."""


@dataclass(frozen=True)
class BpeModel:
    """Base alphabet plus ordered merge list; immutable after training."""

    alphabet: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        known = set(self.alphabet)
        for left, right in self.merges:
            if left not in known or right not in known:
                raise ValueError(f"merge ({left!r}, {right!r}) uses unknown operands")
            known.add(left + right)

    @cached_property
    def tokens(self) -> tuple[str, ...]:
        """Token surfaces for ids >= 4, alphabet first then merge products."""
        return self.alphabet + tuple(l + r for l, r in self.merges)

    @cached_property
    def _id_of(self) -> dict[str, int]:
        # First occurrence wins if two merge paths produce one surface form.
        ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            ids.setdefault(tok, N_SPECIAL + i)
        return ids

    def __len__(self) -> int:
        return N_SPECIAL + len(self.tokens)

    def to_text(self) -> str:
        for ch in self.alphabet:
            if ch in "\n\r":
                raise BpeFileError("alphabet symbol cannot be a line terminator")
        lines = [f"{_FILE_HEADER} {len(self.alphabet)} {len(self.merges)}"]
        lines.extend(self.alphabet)
        lines.extend(f"{l}\t{r}" for l, r in self.merges)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, raw: str, source: str = "bpe model") -> "BpeModel":
        lines = raw.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise BpeFileError(f"{source}: empty model file")
        head = lines[0].split(" ")
        if len(head) != 4 or " ".join(head[:2]) != _FILE_HEADER:
            raise BpeFileError(f"{source}: bad header {lines[0]!r}")
        try:
            n_base, n_merges = int(head[2]), int(head[3])
        except ValueError:
            raise BpeFileError(f"{source}: bad header counts {lines[0]!r}") from None
        if len(lines) != 1 + n_base + n_merges:
            raise BpeFileError(f"{source}: expected {1 + n_base + n_merges} lines")
        alphabet = tuple(lines[1 : 1 + n_base])
        merges = []
        for ln in lines[1 + n_base :]:
            parts = ln.split("\t")
            if len(parts) != 2:
                raise BpeFileError(f"{source}: bad merge line {ln!r}")
            merges.append((parts[0], parts[1]))
        return cls(alphabet, tuple(merges))

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        raw = Path(path).read_text(encoding="utf-8")
        return cls.from_text(raw, source=str(path))


def _merge_pass(symbols: list[str], left: str, right: str) -> list[str]:
    """One left-to-right pass replacing adjacent (left, right) pairs."""
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(corpus: Iterable[str], target_vocab: int) -> BpeModel:
    """Learn merges until the vocabulary reaches ``target_vocab`` tokens
    (specials included) or the best remaining pair occurs fewer than twice.
    """
    word_freq: Counter[str] = Counter()
    chars: set[str] = set()
    for line in corpus:
        for ch in line:
            chars.add(ch)
        word_freq.update(line.split())
    alphabet = tuple(sorted(chars))

    words = [(list(w), f) for w, f in sorted(word_freq.items())]
    merges: list[tuple[str, str]] = []
    size = N_SPECIAL + len(alphabet)
    while size < target_vocab:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for symbols, freq in words:
            for i in range(len(symbols) - 1):
                pair_freq[(symbols[i], symbols[i + 1])] += freq
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        left, right = best[0]
        merges.append((left, right))
        words = [(_merge_pass(s, left, right), f) for s, f in words]
        size += 1
    return BpeModel(alphabet, tuple(merges))


def bpe_encode(text: str, model: BpeModel, frame: bool = False) -> TokenSequence:
    """Greedy merge application: each non-whitespace run starts as single
    codepoints and merges apply in training order. Whitespace and
    out-of-alphabet codepoints encode one codepoint at a time.
    """
    id_of = model._id_of
    ids: list[int] = [BOS_ID] if frame else []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            ids.append(id_of.get(text[i], UNK_ID))
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        symbols = list(text[i:j])
        for left, right in model.merges:
            if len(symbols) < 2:
                break
            symbols = _merge_pass(symbols, left, right)
        ids.extend(id_of.get(s, UNK_ID) for s in symbols)
        i = j
    if frame:
        ids.append(EOS_ID)
    return TokenSequence(ids, framed=frame)


def bpe_decode(tokens: TokenSequence | Iterable[int], model: BpeModel) -> str:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    surfaces = model.tokens
    parts: list[str] = []
    for token_id in ids:
        if not 0 <= token_id < len(model):
            raise ValueError(f"token id {token_id} out of range for V={len(model)}")
        if token_id == UNK_ID:
            parts.append(UNK_SURFACE)
        elif token_id >= N_SPECIAL:
            parts.append(surfaces[token_id - N_SPECIAL])
    return "".join(parts)


class BpeTokenizer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit trains merges, transform encodes to ids."""

    def __init__(self, target_vocab: int = 1000):
        self.target_vocab = target_vocab

    def fit(self, X: Iterable[str], y=None) -> "BpeTokenizer":
        self.model_ = bpe_train(X, self.target_vocab)
        return self

    def transform(self, X: Iterable[str]) -> list[list[int]]:
        check_is_fitted(self, "model_")
        return [bpe_encode(text, self.model_).ids for text in X]

    def inverse_transform(self, X: Iterable[Iterable[int]]) -> list[str]:
        check_is_fitted(self, "model_")
        return [bpe_decode(ids, self.model_) for ids in X]

    def encode(self, text: str, frame: bool = False) -> TokenSequence:
        check_is_fitted(self, "model_")
        return bpe_encode(text, self.model_, frame=frame)

    def decode(self, tokens: TokenSequence | Iterable[int]) -> str:
        check_is_fitted(self, "model_")
        return bpe_decode(tokens, self.model_)

    @property
    def vocab_size_(self) -> int:
        check_is_fitted(self, "model_")
        return len(self.model_)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def from_model_file(cls, path: str | Path) -> "BpeTokenizer":
        tok = cls()
        tok.model_ = BpeModel.load(path)
        tok.target_vocab = len(tok.model_)
        return tok
