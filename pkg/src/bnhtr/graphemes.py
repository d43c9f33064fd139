"""Bengali grapheme-cluster segmentation.

A grapheme cluster is the smallest visually distinguishable written unit.
In Bengali a cluster may span several codepoints: a consonant core with an
optional nukta, conjunct extensions joined by the virama (hasanta), at most
one dependent vowel sign, and trailing modifiers (candrabindu, anusvara,
visarga). Independent vowels take modifiers directly; digits and anything
else stand alone.

The segmenter is a scanner over a fixed regular grammar. It never fails:
codepoints that fit no Bengali rule become single-codepoint clusters, so
``"".join(segment(s)) == s`` for every string.
"""

from __future__ import annotations


def _chars(*spans: tuple[int, int] | int) -> frozenset[str]:
    out: set[str] = set()
    for span in spans:
        if isinstance(span, int):
            out.add(chr(span))
        else:
            lo, hi = span
            out.update(chr(c) for c in range(lo, hi + 1))
    return frozenset(out)


# Bengali block classes used by the cluster grammar.
CONSONANTS = _chars((0x0995, 0x09B9), (0x09DC, 0x09DF), 0x09CE, (0x09F0, 0x09F1))
INDEPENDENT_VOWELS = _chars((0x0985, 0x0994))
VOWEL_SIGNS = _chars((0x09BE, 0x09C4), 0x09C7, 0x09C8, 0x09CB, 0x09CC, 0x09D7)
MODIFIERS = _chars(0x0981, 0x0982, 0x0983)
DIGITS = _chars((0x09E6, 0x09EF))

NUKTA = "়"
VIRAMA = "্"
ZWNJ = "‌"
ZWJ = "‍"
JOINERS = frozenset((ZWNJ, ZWJ))


def segment(text: str) -> list[str]:
    """Split ``text`` into grapheme clusters (a lossless partition).

    Cluster rules:

    * consonant, optional nukta, then any number of conjunct extensions
      ``virama [ZWJ|ZWNJ] consonant [nukta]``, then at most one vowel sign
      and any number of modifiers;
    * a virama not followed by a (possibly joiner-linked) consonant is kept
      as a trailing hasanta and closes the cluster immediately;
    * independent vowel plus any number of modifiers;
    * every other codepoint (Bengali digits included) is its own cluster.
    """
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in CONSONANTS:
            j = i + 1
            if j < n and text[j] == NUKTA:
                j += 1
            closed = False
            while j < n and text[j] == VIRAMA:
                k = j + 1
                if k < n and text[k] in JOINERS:
                    k += 1
                if k < n and text[k] in CONSONANTS:
                    j = k + 1
                    if j < n and text[j] == NUKTA:
                        j += 1
                else:
                    # Word-final hasanta: absorb the virama, nothing after it.
                    j += 1
                    closed = True
                    break
            if not closed:
                if j < n and text[j] in VOWEL_SIGNS:
                    j += 1
                while j < n and text[j] in MODIFIERS:
                    j += 1
            out.append(text[i:j])
            i = j
        elif ch in INDEPENDENT_VOWELS:
            j = i + 1
            while j < n and text[j] in MODIFIERS:
                j += 1
            out.append(text[i:j])
            i = j
        else:
            out.append(ch)
            i += 1
    return out


def segment_characters(text: str) -> list[str]:
    """Split ``text`` into single codepoints (character-level baseline)."""
    return list(text)
