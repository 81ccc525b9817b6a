"""Word alignments and code-switched sentence generation.

A target-language sentence is mixed by swapping a sampled subset of its words
for their aligned English counterparts. Only words whose English counterpart
tokenizes to the identical subword sequence under both vocabularies are
candidates; that is what guarantees the word-level match matrix downstream is
nonempty by construction.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .tokenizer import SubwordVocab, tokenize

_PHARAOH_PAIR = re.compile(r"^(\d+)-(\d+)$")


class AlignmentFormatError(ValueError):
    """Raised on malformed Pharaoh alignment input."""


@dataclass(frozen=True)
class WordAlignment:
    """A set of (source word index, target word index) links."""

    pairs: frozenset[tuple[int, int]]

    def sources_of(self, target_index: int) -> list[int]:
        return sorted(s for s, t in self.pairs if t == target_index)

    def validate_bounds(self, n_source: int, n_target: int) -> None:
        for s, t in self.pairs:
            if not (0 <= s < n_source and 0 <= t < n_target):
                raise ValueError(
                    f"alignment pair ({s},{t}) out of bounds for "
                    f"{n_source} source / {n_target} target words"
                )


@dataclass(frozen=True)
class CodeMixedSentence:
    """A target sentence with some words replaced by aligned English words.

    ``replaced`` holds (target word index, source word index) for every swap,
    sorted by target index; indices are distinct and every non-replaced word
    equals the original target word.
    """

    words: tuple[str, ...]
    replaced: tuple[tuple[int, int], ...]
    origin: Any = None


def parse_alignment(text: str) -> WordAlignment:
    """Parse one Pharaoh line ("0-0 1-2 ..."); duplicates collapse."""
    pairs: set[tuple[int, int]] = set()
    for token in text.split():
        m = _PHARAOH_PAIR.match(token)
        if m is None:
            raise AlignmentFormatError(f"bad alignment token {token!r}")
        pairs.add((int(m.group(1)), int(m.group(2))))
    return WordAlignment(pairs=frozenset(pairs))


def format_alignment(alignment: WordAlignment) -> str:
    return " ".join(f"{s}-{t}" for s, t in sorted(alignment.pairs))


def load_alignments(path: str | Path) -> list[WordAlignment]:
    """Read a Pharaoh file, one line per sentence pair; empty lines are empty alignments."""
    alignments = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                alignments.append(parse_alignment(line))
            except AlignmentFormatError as exc:
                raise AlignmentFormatError(f"line {lineno}: {exc}") from None
    return alignments


def eligible_words(
    source_words: Sequence[str],
    target_words: Sequence[str],
    alignment: WordAlignment,
    student_vocab: SubwordVocab,
    teacher_vocab: SubwordVocab,
) -> list[int]:
    """Target word indices that may be swapped for their English counterpart.

    A target word qualifies iff it is aligned to exactly one source word and
    that source word yields the same ordered subword sequence under both
    vocabularies. One-to-many alignments disqualify a word outright. A source
    word unknown to both vocabularies falls back to [UNK] on both sides and
    therefore counts as identical.
    """
    alignment.validate_bounds(len(source_words), len(target_words))
    eligible = []
    for t in range(len(target_words)):
        sources = alignment.sources_of(t)
        if len(sources) != 1:
            continue
        word = source_words[sources[0]]
        if tokenize(word, student_vocab).tokens == tokenize(word, teacher_vocab).tokens:
            eligible.append(t)
    return eligible


def code_mix(
    source_words: Sequence[str],
    target_words: Sequence[str],
    alignment: WordAlignment,
    student_vocab: SubwordVocab,
    teacher_vocab: SubwordVocab,
    ratio: float,
    seed: int,
    *,
    count_basis: str = "all",
    sampling: str = "exact",
    origin: Any = None,
) -> CodeMixedSentence:
    """Replace a sampled subset of target words with their aligned English words.

    With the default ``exact`` sampling, the swap count is
    ``round(ratio * len(target_words))`` (Python banker's rounding), capped at
    the eligible count; ``count_basis="eligible"`` rounds against the eligible
    count instead, and ``sampling="bernoulli"`` flips one coin per eligible
    word. Selection is uniform without replacement and deterministic given
    ``seed``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if count_basis not in ("all", "eligible"):
        raise ValueError(f"unknown count_basis {count_basis!r}")
    if sampling not in ("exact", "bernoulli"):
        raise ValueError(f"unknown sampling {sampling!r}")

    eligible = eligible_words(
        source_words, target_words, alignment, student_vocab, teacher_vocab
    )
    rng = random.Random(seed)
    if sampling == "exact":
        basis = len(target_words) if count_basis == "all" else len(eligible)
        k = min(round(ratio * basis), len(eligible))
        chosen = sorted(rng.sample(eligible, k))
    else:
        chosen = [t for t in eligible if rng.random() < ratio]

    words = list(target_words)
    replaced = []
    for t in chosen:
        s = alignment.sources_of(t)[0]
        words[t] = source_words[s]
        replaced.append((t, s))
    return CodeMixedSentence(words=tuple(words), replaced=tuple(replaced), origin=origin)
