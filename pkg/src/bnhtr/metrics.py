"""Edit-distance CER/WER evaluation.

Error counts follow the recognition convention: a deletion is a reference
item the hypothesis dropped, an insertion is a hypothesis item with no
reference counterpart, so S + D <= N always holds. Among co-optimal
alignments the backtrace prefers substitution over insertion over deletion,
which makes the split of the minimal distance into (S, D, I) deterministic.

CER counts Unicode codepoints (the community convention for "characters");
a grapheme-cluster error rate is available as a separately labeled extra.
Corpus figures are micro-averaged: counts are summed before dividing.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .graphemes import segment


@dataclass
class EditCounts:
    """Minimal edit alignment tallies against a reference of length N."""

    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        """distance / N; 0 for two empty sequences, NaN when N == 0 only."""
        if self.ref_len == 0:
            return 0.0 if self.distance == 0 else math.nan
        return self.distance / self.ref_len

    def __iadd__(self, other: "EditCounts") -> "EditCounts":
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.ref_len += other.ref_len
        return self

    def to_dict(self) -> dict:
        return {
            "S": self.substitutions,
            "D": self.deletions,
            "I": self.insertions,
            "N": self.ref_len,
        }


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein-minimal substitution/deletion/insertion counts."""
    n, m = len(ref), len(hyp)
    # Wagner-Fischer matrix, kept whole for the backtrace.
    rows = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = rows[-1]
        cur = [i] + [0] * m
        ri = ref[i - 1]
        for j in range(1, m + 1):
            d = prev[j - 1] + (ri != hyp[j - 1])
            u = prev[j] + 1
            l = cur[j - 1] + 1
            cur[j] = d if d <= u and d <= l else (u if u <= l else l)
        rows.append(cur)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = rows[i][j]
        if i > 0 and j > 0 and rows[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]) == here:
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and rows[i][j - 1] + 1 == here:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return EditCounts(subs, dels, ins, n)


def cer(reference: str, hypothesis: str) -> float:
    """Codepoint-level error rate (S + D + I) / N."""
    return edit_counts(reference, hypothesis).rate


def wer(reference: str, hypothesis: str) -> float:
    """Word-level error rate; words are maximal non-whitespace runs."""
    return edit_counts(reference.split(), hypothesis.split()).rate


def grapheme_error_rate(reference: str, hypothesis: str) -> float:
    """Error rate over grapheme clusters (extra column, not the CER)."""
    return edit_counts(segment(reference), segment(hypothesis)).rate


@dataclass
class SampleScore:
    sample_id: str
    char: EditCounts
    word: EditCounts
    grapheme: EditCounts | None = None

    def to_dict(self) -> dict:
        out = {"id": self.sample_id, "char": self.char.to_dict(), "word": self.word.to_dict()}
        if self.grapheme is not None:
            out["grapheme"] = self.grapheme.to_dict()
        return out


@dataclass
class EvalReport:
    """Micro-averaged corpus CER/WER with per-sample edit counts."""

    char_totals: EditCounts = field(default_factory=EditCounts)
    word_totals: EditCounts = field(default_factory=EditCounts)
    grapheme_totals: EditCounts | None = None
    per_sample: list[SampleScore] = field(default_factory=list)

    @property
    def cer(self) -> float:
        return self.char_totals.rate

    @property
    def wer(self) -> float:
        return self.word_totals.rate

    @property
    def n_samples(self) -> int:
        return len(self.per_sample)

    def to_dict(self) -> dict:
        def ratio(counts: EditCounts) -> float | None:
            r = counts.rate
            return None if math.isnan(r) else r

        out = {
            "cer": ratio(self.char_totals),
            "wer": ratio(self.word_totals),
            "n_samples": self.n_samples,
            "normalization": "NFC",
            "totals": {
                "char": self.char_totals.to_dict(),
                "word": self.word_totals.to_dict(),
            },
            "per_sample": [s.to_dict() for s in self.per_sample],
        }
        if self.grapheme_totals is not None:
            out["grapheme_cer"] = ratio(self.grapheme_totals)
            out["totals"]["grapheme"] = self.grapheme_totals.to_dict()
        return out


def aggregate(samples: Iterable[tuple], include_grapheme: bool = False) -> EvalReport:
    """Score (reference, hypothesis) pairs or (sample_id, ref, hyp) triples.

    Both sides are NFC-normalized before scoring; the report says so in its
    ``normalization`` field.
    """
    report = EvalReport(grapheme_totals=EditCounts() if include_grapheme else None)
    for index, item in enumerate(samples):
        if len(item) == 2:
            sample_id, (ref, hyp) = index, item
        else:
            sample_id, ref, hyp = item
        ref = unicodedata.normalize("NFC", ref)
        hyp = unicodedata.normalize("NFC", hyp)
        score = SampleScore(
            sample_id=str(sample_id),
            char=edit_counts(ref, hyp),
            word=edit_counts(ref.split(), hyp.split()),
        )
        if include_grapheme:
            score.grapheme = edit_counts(segment(ref), segment(hyp))
            report.grapheme_totals += score.grapheme
        report.char_totals += score.char
        report.word_totals += score.word
        report.per_sample.append(score)
    return report
