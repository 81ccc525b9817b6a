"""Subword vocabularies, greedy longest-match tokenization, and token match matrices.

Two independent vocabularies coexist in a run (a teacher-role one and a
student-role one); nothing in this module assumes they share entries. All
types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)

# Prefix marking a subword that continues the previous one within a word.
CONTINUATION_PREFIX = "##"

# A binary match/align matrix, shape (student tokens, teacher tokens),
# dtype uint8, entries in {0, 1}.
AlignmentMatrix = np.ndarray


class VocabFormatError(ValueError):
    """Raised when a vocabulary file violates the one-subword-per-line format."""


@dataclass(frozen=True)
class SubwordVocab:
    """An ordered subword inventory with dense ids 0..V-1.

    The four special tokens must each appear exactly once; duplicates of any
    entry are rejected.
    """

    entries: tuple[str, ...]
    id_of: dict[str, int] = field(repr=False)
    pad_id: int
    unk_id: int
    cls_id: int
    sep_id: int

    @classmethod
    def from_entries(cls, entries: Sequence[str]) -> "SubwordVocab":
        id_of: dict[str, int] = {}
        for i, entry in enumerate(entries):
            if entry in id_of:
                raise VocabFormatError(f"duplicate vocabulary entry {entry!r}")
            if entry == "":
                raise VocabFormatError("empty vocabulary entry")
            id_of[entry] = i
        for special in SPECIAL_TOKENS:
            if special not in id_of:
                raise VocabFormatError(f"missing special token {special!r}")
        return cls(
            entries=tuple(entries),
            id_of=id_of,
            pad_id=id_of[PAD_TOKEN],
            unk_id=id_of[UNK_TOKEN],
            cls_id=id_of[CLS_TOKEN],
            sep_id=id_of[SEP_TOKEN],
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of


@dataclass(frozen=True)
class TokenizedText:
    """Subword sequence plus word-span bookkeeping for one piece of text.

    ``word_spans`` holds ``(word_index, first_subword, last_subword)`` with
    inclusive bounds; the spans tile the subword sequence without gaps or
    overlaps, and every subword belongs to exactly one source word.
    """

    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    word_spans: tuple[tuple[int, int, int], ...]
    source_words: tuple[str, ...]

    @property
    def subwords(self) -> list[tuple[str, int]]:
        return list(zip(self.tokens, self.ids))

    def __len__(self) -> int:
        return len(self.tokens)

    def span_tokens(self, word_index: int) -> tuple[str, ...]:
        _, first, last = self.word_spans[word_index]
        return self.tokens[first : last + 1]


def load_vocab(path: str | Path) -> SubwordVocab:
    """Read a UTF-8 vocabulary file, one subword per line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return SubwordVocab.from_entries(lines)


def dump_vocab(vocab: SubwordVocab, path: str | Path) -> None:
    """Write the vocabulary back out; load→dump→load is the identity."""
    Path(path).write_text("\n".join(vocab.entries) + "\n", encoding="utf-8")


def _segment_word(word: str, vocab: SubwordVocab) -> list[str] | None:
    """Greedy longest-match segmentation of one word; None if impossible."""
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION_PREFIX + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return None
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: SubwordVocab) -> TokenizedText:
    """Lowercase, split on whitespace, and segment each word into subwords.

    A word with no valid segmentation becomes a single unknown token. The
    result is a pure function of ``(text, vocab)``.
    """
    words = text.lower().split()
    tokens: list[str] = []
    ids: list[int] = []
    spans: list[tuple[int, int, int]] = []
    for w, word in enumerate(words):
        pieces = _segment_word(word, vocab)
        if pieces is None:
            pieces = [UNK_TOKEN]
        first = len(tokens)
        tokens.extend(pieces)
        ids.extend(vocab.id_of[p] for p in pieces)
        spans.append((w, first, len(tokens) - 1))
    return TokenizedText(
        tokens=tuple(tokens),
        ids=tuple(ids),
        word_spans=tuple(spans),
        source_words=tuple(words),
    )


def match_matrix(
    student: TokenizedText,
    teacher: TokenizedText,
    span_pairs: Sequence[tuple[int, int]],
) -> AlignmentMatrix:
    """Binary matrix of matched-and-aligned subwords between two tokenizations.

    ``span_pairs`` lists the candidate ``(student word index, teacher word
    index)`` pairs; it must be one-to-one on both sides, which is what keeps
    row and column sums at most 1. Entry (i, j) is 1 iff token i and token j
    carry the same subword string, fall inside a candidate span pair, and sit
    at the same ordinal position within their spans.
    """
    used_student: set[int] = set()
    used_teacher: set[int] = set()
    for sw, tw in span_pairs:
        if not 0 <= sw < len(student.word_spans):
            raise IndexError(f"student word index {sw} out of range")
        if not 0 <= tw < len(teacher.word_spans):
            raise IndexError(f"teacher word index {tw} out of range")
        if sw in used_student or tw in used_teacher:
            raise ValueError("span_pairs must be one-to-one on both sides")
        used_student.add(sw)
        used_teacher.add(tw)

    matrix = np.zeros((len(student), len(teacher)), dtype=np.uint8)
    for sw, tw in span_pairs:
        _, s_first, s_last = student.word_spans[sw]
        _, t_first, t_last = teacher.word_spans[tw]
        overlap = min(s_last - s_first, t_last - t_first) + 1
        for k in range(overlap):
            i = s_first + k
            j = t_first + k
            if student.tokens[i] == teacher.tokens[j]:
                matrix[i, j] = 1
    return matrix


def tag_match_matrix(
    student_tags: Sequence[TokenizedText],
    teacher_tags: Sequence[TokenizedText],
) -> AlignmentMatrix:
    """Match matrix over the concatenated tag token sequences of both sides.

    Tags pair up by list position (both sides carry the same English tags, in
    order); each pair contributes a block on the diagonal. Sides may disagree
    on tag count after truncation, in which case trailing tags are unmatched.
    """
    n_student = sum(len(t) for t in student_tags)
    n_teacher = sum(len(t) for t in teacher_tags)
    matrix = np.zeros((n_student, n_teacher), dtype=np.uint8)
    row = col = 0
    for k in range(min(len(student_tags), len(teacher_tags))):
        s_tok, t_tok = student_tags[k], teacher_tags[k]
        pairs = [(w, w) for w in range(min(len(s_tok.word_spans), len(t_tok.word_spans)))]
        block = match_matrix(s_tok, t_tok, pairs)
        matrix[row : row + len(s_tok), col : col + len(t_tok)] = block
        row += len(s_tok)
        col += len(t_tok)
    return matrix
