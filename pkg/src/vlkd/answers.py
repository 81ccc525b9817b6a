"""Answer-class vocabularies: frequency ranking, translation merging, targets.

The classifier head predicts over the top-k most frequent answers. For a
target language whose classes come from translated English answers, classes
whose translations collide are merged into one class that keeps every surface
form as a member.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnswerVocabulary:
    """Ranked answer classes with surface-form membership and dataset coverage.

    ``classes`` are canonical strings; ``members`` maps each canonical string
    to the set of surface answers it absorbs (singleton before any merge);
    ``index`` maps every surface form to its class id. ``coverage`` is the
    fraction of answer occurrences in the build dataset that some class
    represents, NaN when unknown (e.g. after loading from disk).
    """

    classes: tuple[str, ...]
    members: dict[str, frozenset[str]]
    class_counts: tuple[int, ...]
    index: dict[str, int]
    coverage: float

    def __len__(self) -> int:
        return len(self.classes)

    def class_of(self, answer: str) -> int | None:
        return self.index.get(answer)


def build_answer_vocab(answers: Iterable[str], k: int) -> AnswerVocabulary:
    """Top-k answers by frequency, ties broken lexicographically."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter(answers)
    if not counts:
        raise ValueError("cannot build an answer vocabulary from an empty multiset")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < k:
        logger.warning(
            "requested %d classes but only %d distinct answers exist", k, len(ranked)
        )
    top = ranked[:k]
    classes = tuple(a for a, _ in top)
    total = sum(counts.values())
    covered = sum(c for _, c in top)
    return AnswerVocabulary(
        classes=classes,
        members={a: frozenset([a]) for a in classes},
        class_counts=tuple(c for _, c in top),
        index={a: i for i, a in enumerate(classes)},
        coverage=covered / total,
    )


def merge_by_translation(
    vocab: AnswerVocabulary, translations: Mapping[str, str]
) -> AnswerVocabulary:
    """Merge classes whose translations collide; canonical strings become translations.

    Every class needs a translation entry. Class order follows the first
    occurrence of each translation among the original classes; member sets
    union, so no surface form is ever dropped and coverage is unchanged.
    """
    missing = [c for c in vocab.classes if c not in translations]
    if missing:
        raise ValueError(f"missing translations for: {', '.join(sorted(missing))}")

    new_classes: list[str] = []
    new_members: dict[str, set[str]] = {}
    new_counts: dict[str, int] = {}
    for canonical, count in zip(vocab.classes, vocab.class_counts):
        translated = translations[canonical]
        if translated not in new_members:
            new_classes.append(translated)
            new_members[translated] = set()
            new_counts[translated] = 0
        new_members[translated].update(vocab.members[canonical])
        new_counts[translated] += count

    index = {}
    for i, c in enumerate(new_classes):
        for member in new_members[c]:
            index[member] = i
    return AnswerVocabulary(
        classes=tuple(new_classes),
        members={c: frozenset(m) for c, m in new_members.items()},
        class_counts=tuple(new_counts[c] for c in new_classes),
        index=index,
        coverage=vocab.coverage,
    )


def coverage(dataset_answers: Iterable[str], vocab: AnswerVocabulary) -> float:
    """Fraction of answer occurrences whose surface form belongs to some class."""
    total = covered = 0
    for answer in dataset_answers:
        total += 1
        if answer in vocab.index:
            covered += 1
    if total == 0:
        raise ValueError("coverage over an empty dataset is undefined")
    return covered / total


def encode_targets(
    answers: Sequence[tuple[str, int]],
    vocab: AnswerVocabulary,
    mode: str,
) -> tuple[np.ndarray, bool]:
    """Encode annotated answers into a classifier target vector.

    ``single`` requires exactly one answer and yields a one-hot vector (all
    zero when the answer is uncovered); ``soft`` yields the VQA-style
    per-class score ``min(count / 3, 1)`` over the annotation multiset. The
    second return value flags whether any annotation was covered.
    """
    target = np.zeros(len(vocab), dtype=np.float32)
    if mode == "single":
        if len(answers) != 1:
            raise ValueError(f"single mode requires exactly one answer, got {len(answers)}")
        cid = vocab.class_of(answers[0][0])
        if cid is None:
            return target, False
        target[cid] = 1.0
        return target, True
    if mode == "soft":
        per_class: Counter[int] = Counter()
        for answer, count in answers:
            cid = vocab.class_of(answer)
            if cid is not None:
                per_class[cid] += count
        for cid, count in per_class.items():
            target[cid] = min(count / 3.0, 1.0)
        return target, bool(per_class)
    raise ValueError(f"unknown target mode {mode!r}")


def save_answer_vocab(vocab: AnswerVocabulary, path: str | Path) -> None:
    """Persist as TSV: class_id, canonical, members..., frequency.

    A leading comment line carries the coverage so load round-trips.
    """
    lines = [f"# coverage\t{vocab.coverage!r}"]
    for i, canonical in enumerate(vocab.classes):
        members = "\t".join(sorted(vocab.members[canonical]))
        lines.append(f"{i}\t{canonical}\t{members}\t{vocab.class_counts[i]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_answer_vocab(path: str | Path) -> AnswerVocabulary:
    text = Path(path).read_text(encoding="utf-8")
    cov = math.nan
    classes: list[str] = []
    members: dict[str, frozenset[str]] = {}
    counts: list[int] = []
    index: dict[str, int] = {}
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("#"):
            cov = float(line.split("\t")[1])
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise ValueError(f"malformed answer vocabulary row: {line!r}")
        cid, canonical, count = int(fields[0]), fields[1], int(fields[-1])
        member_set = frozenset(fields[2:-1])
        if cid != len(classes):
            raise ValueError(f"non-contiguous class id {cid}")
        classes.append(canonical)
        members[canonical] = member_set
        counts.append(count)
        for m in member_set:
            index[m] = cid
    return AnswerVocabulary(
        classes=tuple(classes),
        members=members,
        class_counts=tuple(counts),
        index=index,
        coverage=cov,
    )
