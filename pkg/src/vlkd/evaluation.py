"""Accuracy metrics, corpus BLEU over short answers, and embedding export."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .answers import AnswerVocabulary
from .data import ExampleRecord, assemble_triple
from .model import ROLE_QUESTION, ROLE_REGION, ROLE_TAG, FusionEncoder
from .tokenizer import SubwordVocab

# Smallest precision credited to an n-gram order with no matches; answers are
# short, so higher orders are frequently empty.
BLEU_EPSILON = 1e-9

# First match wins; the empty trigger is the terminating catch-all.
JAPANESE_QUESTION_RULES: tuple[tuple[str, str], ...] = (
    ("nani", "nani"),
    ("dare", "dare"),
    ("doko", "doko"),
    ("donna", "donna"),
    ("dorekurai", "dorekurai"),
    ("dou", "dou"),
    ("itsu", "itsu"),
    ("ikutsu", "ikutsu"),
    ("naze", "naze"),
    ("other", ""),
)


@dataclass(frozen=True)
class TypeScore:
    count: int
    accuracy: float


@dataclass
class EvalReport:
    overall_accuracy: float
    n_items: int
    per_type: dict[str, TypeScore] = field(default_factory=dict)
    bleu: float | None = None
    coverage: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.overall_accuracy <= 1.0:
            raise ValueError("accuracy out of [0, 1]")
        if sum(t.count for t in self.per_type.values()) not in (0, self.n_items):
            raise ValueError("per-type counts must sum to the item total")

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "n_items": self.n_items,
            "per_type": {
                k: {"count": v.count, "accuracy": v.accuracy}
                for k, v in self.per_type.items()
            },
            "bleu": self.bleu,
            "coverage": self.coverage,
        }


def accuracy_exact(
    predictions: Sequence[int],
    references: Sequence[str],
    vocab: AnswerVocabulary,
) -> float:
    """Fraction of items whose predicted class covers the reference string.

    A reference outside the vocabulary can never be correct, which is exactly
    how low class coverage depresses the final score.
    """
    if len(predictions) != len(references):
        raise ValueError("predictions and references must have equal length")
    correct = 0
    for pred, ref in zip(predictions, references):
        if not 0 <= pred < len(vocab):
            raise ValueError(f"predicted class id {pred} out of range")
        if vocab.class_of(ref) == pred:
            correct += 1
    return correct / len(predictions)


def vqa_soft_item_score(pred: int, annotations: Sequence[str],
                        vocab: AnswerVocabulary) -> float:
    matches = sum(1 for a in annotations if vocab.class_of(a) == pred)
    return min(matches / 3.0, 1.0)


def accuracy_vqa_soft(
    predictions: Sequence[int],
    annotations: Sequence[Sequence[str]],
    vocab: AnswerVocabulary,
) -> float:
    """Mean of min(matches/3, 1) against 10-annotator answer multisets."""
    if len(predictions) != len(annotations):
        raise ValueError("predictions and annotations must have equal length")
    scores = []
    for pred, annot in zip(predictions, annotations):
        if len(annot) != 10:
            raise ValueError(f"expected 10 annotations per item, got {len(annot)}")
        scores.append(vqa_soft_item_score(pred, annot, vocab))
    return sum(scores) / len(scores)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    predictions: Sequence[str],
    references: Sequence[str],
    tokenizer: Callable[[str], list[str]] = str.split,
) -> float:
    """Corpus-level BLEU-4 with brevity penalty, in [0, 100].

    N-gram orders with candidates but zero clipped matches get the epsilon
    precision instead of zeroing the geometric mean; orders with no candidate
    n-grams anywhere in the corpus (every answer shorter than n) drop out of
    the mean, so an identical single-word corpus still scores 100. The word
    splitter is pluggable for language-specific tokenization; default is
    whitespace.
    """
    if len(predictions) != len(references):
        raise ValueError("predictions and references must have equal length")
    if not predictions:
        raise ValueError("BLEU over an empty corpus is undefined")

    clipped = [0] * 4
    totals = [0] * 4
    pred_len = ref_len = 0
    for pred, ref in zip(predictions, references):
        pred_tokens = tokenizer(pred)
        ref_tokens = tokenizer(ref)
        pred_len += len(pred_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, 5):
            pred_counts = _ngrams(pred_tokens, n)
            ref_counts = _ngrams(ref_tokens, n)
            totals[n - 1] += sum(pred_counts.values())
            clipped[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in pred_counts.items()
            )

    log_precisions = []
    for c, t in zip(clipped, totals):
        if t == 0:
            continue
        log_precisions.append(math.log(c / t if c else BLEU_EPSILON))
    if not log_precisions:
        return 0.0
    brevity = 1.0 if pred_len > ref_len else math.exp(1.0 - ref_len / max(pred_len, 1))
    return 100.0 * brevity * math.exp(sum(log_precisions) / len(log_precisions))


def question_type_breakdown(
    questions: Sequence[str],
    scores: Sequence[float],
    rules: Sequence[tuple[str, str]],
) -> dict[str, TypeScore]:
    """Bucket questions by the first rule whose trigger substring occurs.

    The final rule must be the catch-all (empty trigger), so every question
    lands somewhere; empty buckets report zero accuracy.
    """
    if len(questions) != len(scores):
        raise ValueError("questions and scores must have equal length")
    if not rules or rules[-1][1] != "":
        raise ValueError("rules must end with a catch-all (empty trigger)")

    sums: dict[str, float] = {name: 0.0 for name, _ in rules}
    counts: dict[str, int] = {name: 0 for name, _ in rules}
    for question, score in zip(questions, scores):
        for name, trigger in rules:
            if trigger in question:
                sums[name] += score
                counts[name] += 1
                break
    return {
        name: TypeScore(counts[name], sums[name] / counts[name] if counts[name] else 0.0)
        for name, _ in rules
    }


def evaluate_predictions(
    predictions: Sequence[int],
    records: Sequence[ExampleRecord],
    vocab: AnswerVocabulary,
    *,
    metric: str = "exact",
    type_rules: Sequence[tuple[str, str]] | None = None,
    bleu_tokenizer: Callable[[str], list[str]] = str.split,
) -> EvalReport:
    """Score predicted class ids against records and assemble a report."""
    if len(predictions) != len(records):
        raise ValueError("one prediction per record required")
    if metric == "vqa_soft":
        scores = [
            vqa_soft_item_score(p, [a for a, c in r.answers for _ in range(c)], vocab)
            for p, r in zip(predictions, records)
        ]
    elif metric == "exact":
        scores = [
            1.0 if vocab.class_of(r.answers[0][0]) == p else 0.0
            for p, r in zip(predictions, records)
        ]
    else:
        raise ValueError(f"unknown metric {metric!r}")

    overall = sum(scores) / len(scores)
    per_type = {}
    if type_rules is not None:
        per_type = question_type_breakdown(
            [r.question for r in records], scores, type_rules
        )
    predicted_strings = [vocab.classes[p] for p in predictions]
    reference_strings = [r.answers[0][0] for r in records]
    report = EvalReport(
        overall_accuracy=overall,
        n_items=len(records),
        per_type=per_type,
        bleu=bleu(predicted_strings, reference_strings, bleu_tokenizer),
        coverage=None if math.isnan(vocab.coverage) else vocab.coverage,
    )
    return report


def export_embeddings(
    model: FusionEncoder,
    records: Sequence[ExampleRecord],
    token_filter: set[str],
    layer: int,
    path: str | Path,
    subword_vocab: SubwordVocab,
) -> int:
    """Dump hidden vectors for filtered tokens and matching labeled regions.

    Writes TSV rows (token, role word|region, object label, vector components)
    suitable for external 2-D projection; returns the number of rows written.
    Vector components are full-precision reprs, so reading them back
    reproduces the forward-pass values bit for bit.
    """
    if not 1 <= layer <= model.config.num_layers:
        raise ValueError(f"layer {layer} outside 1..{model.config.num_layers}")
    rows = []
    with torch.no_grad():
        for record in records:
            triple = assemble_triple(record, subword_vocab, model.config)
            out = model.encode([triple], [layer])[0]
            states = out.layer(layer)
            text_positions = [
                i for i in (out.positions(ROLE_QUESTION) + out.positions(ROLE_TAG))
            ]
            text_tokens = list(triple.question.tokens)
            text_tokens += [tok for tag in triple.tags for tok in tag.tokens]
            for pos, token in zip(sorted(text_positions), text_tokens):
                if token in token_filter:
                    rows.append((token, "word", token, states[pos]))
            labels = record.labels_for_regions()
            if labels is not None:
                region_positions = out.positions(ROLE_REGION)
                for pos, label in zip(region_positions, labels):
                    if label in token_filter:
                        rows.append((label, "region", label, states[pos]))

    hidden = model.config.hidden_size
    header = ["token", "role", "label"] + [f"d{i}" for i in range(hidden)]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\t".join(header) + "\n")
        for token, role, label, vector in rows:
            values = "\t".join(repr(float(x)) for x in vector)
            handle.write(f"{token}\t{role}\t{label}\t{values}\n")
    return len(rows)
