"""Dataset records, JSONL ingestion, triple assembly, and synthetic corpora.

Records are either task examples (question + answers + tags + region
features) or parallel pairs (an English example and its target-language
translation sharing the image side, plus a word alignment). The synthetic
corpus generator produces a fully controllable bilingual world so every
training and evaluation path runs without external data.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codemix import WordAlignment, code_mix, format_alignment, parse_alignment
from .distill import DistillationBatchItem
from .model import (
    ROLE_CLS,
    ROLE_QUESTION,
    ROLE_SEP,
    ROLE_TAG,
    ModelConfig,
    RegionFeatures,
    WordTagImageTriple,
)
from .tokenizer import (
    SPECIAL_TOKENS,
    SubwordVocab,
    TokenizedText,
    match_matrix,
    tag_match_matrix,
    tokenize,
)


class DatasetFormatError(ValueError):
    """Raised when a JSONL dataset fails validation under the strict flag."""


@dataclass(frozen=True)
class ExampleRecord:
    question_id: str
    image_id: str
    question: str
    language: str
    answers: tuple[tuple[str, int], ...]
    tags: tuple[str, ...]
    features: np.ndarray | None = None
    feature_ref: str | None = None
    region_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.features is None and self.feature_ref is None:
            raise ValueError("record needs inline features or a feature_ref")
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float32)
            if not np.all(np.isfinite(f)):
                raise ValueError("non-finite feature values")
            object.__setattr__(self, "features", f)

    def labels_for_regions(self) -> tuple[str, ...] | None:
        """Per-region object labels: explicit, or the tags when counts line up."""
        if self.region_labels is not None:
            return self.region_labels
        if self.features is not None and len(self.tags) == self.features.shape[0]:
            return self.tags
        return None


@dataclass(frozen=True)
class ParallelRecord:
    """An English example and its translation sharing the image side."""

    source: ExampleRecord
    target: ExampleRecord
    alignment: WordAlignment

    def __post_init__(self):
        if self.source.image_id != self.target.image_id:
            raise ValueError("parallel pair must share image_id")
        if self.source.tags != self.target.tags:
            raise ValueError("parallel pair must share object tags")
        if not np.array_equal(self.source.features, self.target.features):
            raise ValueError("parallel pair must share identical region features")
        self.alignment.validate_bounds(
            len(self.source.question.split()), len(self.target.question.split())
        )


def _example_to_json(record: ExampleRecord) -> dict:
    out = {
        "question_id": record.question_id,
        "image_id": record.image_id,
        "question": record.question,
        "language": record.language,
        "answers": [[a, c] for a, c in record.answers],
        "tags": list(record.tags),
    }
    if record.features is not None:
        out["features"] = [[float(x) for x in row] for row in record.features]
    if record.feature_ref is not None:
        out["feature_ref"] = record.feature_ref
    if record.region_labels is not None:
        out["region_labels"] = list(record.region_labels)
    return out


def _example_from_json(obj: dict) -> ExampleRecord:
    features = obj.get("features")
    return ExampleRecord(
        question_id=str(obj["question_id"]),
        image_id=str(obj["image_id"]),
        question=obj["question"],
        language=obj.get("language", "en"),
        answers=tuple((a, int(c)) for a, c in obj["answers"]),
        tags=tuple(obj["tags"]),
        features=np.asarray(features, dtype=np.float32) if features is not None else None,
        feature_ref=obj.get("feature_ref"),
        region_labels=tuple(obj["region_labels"]) if "region_labels" in obj else None,
    )


def record_to_json(record: ExampleRecord | ParallelRecord) -> dict:
    if isinstance(record, ParallelRecord):
        return {
            "source": _example_to_json(record.source),
            "target": _example_to_json(record.target),
            "alignment": format_alignment(record.alignment),
        }
    return _example_to_json(record)


def record_from_json(obj: dict, schema: str):
    if schema == "parallel":
        return ParallelRecord(
            source=_example_from_json(obj["source"]),
            target=_example_from_json(obj["target"]),
            alignment=parse_alignment(obj["alignment"]),
        )
    if schema == "task":
        record = _example_from_json(obj)
        if not record.answers:
            raise ValueError("task record has no answers")
        return record
    raise ValueError(f"unknown schema {schema!r}")


def load_dataset(path: str | Path, schema: str, strict: bool = True) -> list:
    """Load a JSONL dataset; under ``strict`` any malformed line aborts.

    The raised error lists every offending line number; with strict off the
    bad lines are skipped and the valid records returned.
    """
    records = []
    errors = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line), schema))
            except (KeyError, TypeError, ValueError) as exc:
                errors.append((lineno, str(exc)))
    if errors and strict:
        listing = "; ".join(f"line {n}: {msg}" for n, msg in errors)
        raise DatasetFormatError(f"{len(errors)} malformed line(s): {listing}")
    return records


def dump_dataset(records: Sequence, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")


def save_feature_file(features: dict[str, np.ndarray], path: str | Path) -> None:
    """Binary feature container plus a plain-text image-id index alongside."""
    path = Path(path)
    np.savez(path, **{k: np.asarray(v, dtype=np.float32) for k, v in features.items()})
    index = path.with_suffix(path.suffix + ".index.txt")
    index.write_text("\n".join(sorted(features)) + "\n", encoding="utf-8")


def load_feature_file(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {k: archive[k] for k in archive.files}


def resolve_features(records: Sequence[ExampleRecord],
                     store: dict[str, np.ndarray]) -> list[ExampleRecord]:
    """Fill in features for records that carry only a feature_ref."""
    out = []
    for record in records:
        if record.features is not None:
            out.append(record)
            continue
        if record.feature_ref not in store:
            raise KeyError(f"feature_ref {record.feature_ref!r} missing from store")
        out.append(ExampleRecord(
            question_id=record.question_id,
            image_id=record.image_id,
            question=record.question,
            language=record.language,
            answers=record.answers,
            tags=record.tags,
            features=store[record.feature_ref],
            region_labels=record.region_labels,
        ))
    return out


def _truncate_tokenized(text: TokenizedText, keep: int) -> TokenizedText:
    if keep >= len(text):
        return text
    spans = []
    words = []
    for w, first, last in text.word_spans:
        if first >= keep:
            break
        spans.append((w, first, min(last, keep - 1)))
        words.append(text.source_words[w])
    return TokenizedText(
        tokens=text.tokens[:keep],
        ids=text.ids[:keep],
        word_spans=tuple(spans),
        source_words=tuple(words),
    )


def assemble_triple(
    record: ExampleRecord,
    vocab: SubwordVocab,
    config: ModelConfig,
    question_override: str | None = None,
) -> WordTagImageTriple:
    """Tokenize and lay out one record as [CLS] question [SEP] tags [SEP].

    When the combined text exceeds ``max_text_tokens``, trailing tag subwords
    are dropped first, then trailing question subwords; regions keep their
    first ``max_image_tokens`` rows. ``question_override`` substitutes the
    question text (used to feed code-switched sentences).
    """
    if record.features is None:
        raise ValueError("record features must be resolved before assembly")
    text = record.question if question_override is None else question_override
    question = tokenize(text, vocab)
    tags = [tokenize(t, vocab) for t in record.tags]

    available = config.max_text_tokens - 3
    q_len = len(question)
    t_len = sum(len(t) for t in tags)
    t_keep = min(t_len, max(0, available - q_len))
    q_keep = min(q_len, available - t_keep)

    question = _truncate_tokenized(question, q_keep)
    kept_tags: list[TokenizedText] = []
    budget = t_keep
    for tag in tags:
        if budget <= 0:
            break
        kept = _truncate_tokenized(tag, min(len(tag), budget))
        if len(kept):
            kept_tags.append(kept)
        budget -= len(kept)

    regions = RegionFeatures(record.features[: config.max_image_tokens])

    token_ids = [vocab.cls_id]
    roles = [ROLE_CLS]
    segments = [0]
    token_ids.extend(question.ids)
    roles.extend([ROLE_QUESTION] * len(question))
    segments.extend([0] * len(question))
    token_ids.append(vocab.sep_id)
    roles.append(ROLE_SEP)
    segments.append(0)
    for tag in kept_tags:
        token_ids.extend(tag.ids)
        roles.extend([ROLE_TAG] * len(tag))
        segments.extend([1] * len(tag))
    token_ids.append(vocab.sep_id)
    roles.append(ROLE_SEP)
    segments.append(1)

    triple = WordTagImageTriple(
        question=question,
        tags=tuple(kept_tags),
        regions=regions,
        token_ids=tuple(token_ids),
        roles=tuple(roles),
        segments=tuple(segments),
        pad_id=vocab.pad_id,
    )
    triple.validate_budget(config)
    return triple


def build_distillation_item(
    pair: ParallelRecord,
    student_vocab: SubwordVocab,
    teacher_vocab: SubwordVocab,
    config: ModelConfig,
    ratio: float,
    seed: int,
    two_pass: bool = False,
) -> DistillationBatchItem:
    """Code-mix the target question, assemble both triples, build match matrices."""
    source_words = pair.source.question.split()
    target_words = pair.target.question.split()
    mixed = code_mix(
        source_words, target_words, pair.alignment,
        student_vocab, teacher_vocab, ratio, seed,
    )
    teacher_triple = assemble_triple(pair.source, teacher_vocab, config)
    student_triple = assemble_triple(
        pair.target, student_vocab, config, question_override=" ".join(mixed.words)
    )
    plain = assemble_triple(pair.target, student_vocab, config) if two_pass else None

    # In two-pass mode the tag objective reads the plain pass, whose tag
    # truncation may differ from the mixed sentence's.
    tag_source = plain if plain is not None else student_triple
    tag_matrix = tag_match_matrix(tag_source.tags, teacher_triple.tags)

    # Truncation can drop replaced words; a source word aligned to several
    # targets may appear twice, and match_matrix requires one-to-one pairs.
    n_student_words = len(student_triple.question.word_spans)
    n_teacher_words = len(teacher_triple.question.word_spans)
    span_pairs = []
    used_sources: set[int] = set()
    for t, s in mixed.replaced:
        if t < n_student_words and s < n_teacher_words and s not in used_sources:
            span_pairs.append((t, s))
            used_sources.add(s)
    word_matrix = match_matrix(student_triple.question, teacher_triple.question, span_pairs)

    return DistillationBatchItem(
        teacher_input=teacher_triple,
        student_input=student_triple,
        tag_matrix=tag_matrix,
        word_matrix=word_matrix,
        student_plain_input=plain,
    )


def build_distillation_items(
    pairs: Sequence[ParallelRecord],
    student_vocab: SubwordVocab,
    teacher_vocab: SubwordVocab,
    config: ModelConfig,
    ratio: float,
    base_seed: int,
    two_pass: bool = False,
) -> list[DistillationBatchItem]:
    """Per-sentence seeds derive from ``base_seed + index`` for reproducibility."""
    return [
        build_distillation_item(
            pair, student_vocab, teacher_vocab, config, ratio, base_seed + i, two_pass
        )
        for i, pair in enumerate(pairs)
    ]


# --- synthetic corpus -------------------------------------------------------

# Disjoint consonant sets keep English, target-language and tag words from
# sharing subword strings except where the generator plants them on purpose.
_EN_SYLLABLES = [c + v for c in "bdfgklmnprst" for v in "aeiou"]
_TARGET_SYLLABLES = [c + v for c in "vwxyz" for v in "aiou"]
_TAG_SYLLABLES = [c + v for c in "qhjc" for v in "aeiou"]


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the synthetic bilingual corpus."""

    n_parallel: int = 64
    n_task: int = 32
    lexicon_size: int = 30
    eligible_fraction: float = 1.0
    n_tags: int = 10
    partial_tag_fraction: float = 0.4
    n_answers: int = 6
    question_words: tuple[int, int] = (4, 8)
    tags_per_image: tuple[int, int] = (2, 3)
    feature_dim: int = 8
    annotations_per_question: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_parallel < 0 or self.n_task < 0:
            raise ValueError("corpus sizes must be nonnegative")
        if not 0.0 <= self.eligible_fraction <= 1.0:
            raise ValueError("eligible_fraction must be in [0, 1]")
        if self.annotations_per_question not in (1, 10):
            raise ValueError("annotations_per_question must be 1 or 10")


@dataclass(frozen=True)
class SynthCorpus:
    student_vocab: SubwordVocab
    teacher_vocab: SubwordVocab
    parallel: tuple[ParallelRecord, ...]
    task: tuple[ExampleRecord, ...]


def _make_word(index: int, syllables: list[str], length: int = 2) -> str:
    """Base-N positional encoding of ``index``; injective below N**length."""
    parts = []
    x = index
    for _ in range(length):
        parts.append(syllables[x % len(syllables)])
        x //= len(syllables)
    return "".join(parts)


def synth_corpus(spec: SynthSpec) -> SynthCorpus:
    """Deterministic bilingual corpus with controllable eligibility.

    English lexicon words below the eligibility cutoff enter both vocabularies
    whole (identical single-subword tokenization); the rest enter the teacher
    vocabulary whole but only as split pieces in the student one, so the two
    segmentations differ. Tags mix full-match and partial-match segmentations.
    Task answers are a deterministic function of the first question word, so
    a capable model can memorize the mapping.
    """
    rng = random.Random(spec.seed)
    feature_rng = np.random.default_rng(spec.seed)

    english = [_make_word(i, _EN_SYLLABLES) for i in range(spec.lexicon_size)]
    target = [_make_word(i, _TARGET_SYLLABLES, length=3) for i in range(spec.lexicon_size)]
    n_eligible = round(spec.eligible_fraction * spec.lexicon_size)

    student_entries = set()
    teacher_entries = set()
    for i, word in enumerate(english):
        teacher_entries.add(word)
        if i < n_eligible:
            student_entries.add(word)
        else:
            # Student must not reassemble the whole word: expose pieces only.
            student_entries.add(word[:2])
            student_entries.add("##" + word[2:])
    student_entries.update(target)

    tag_words = []
    n_partial = round(spec.partial_tag_fraction * spec.n_tags)
    for i in range(spec.n_tags):
        word = _make_word(i, _TAG_SYLLABLES, length=3)
        tag_words.append(word)
        if i < n_partial:
            # Teacher splits once, student twice; only the first piece matches.
            teacher_entries.update([word[:4], "##" + word[4:]])
            student_entries.update([word[:4], "##" + word[4:5], "##" + word[5:]])
        else:
            teacher_entries.add(word)
            student_entries.add(word)

    student_vocab = SubwordVocab.from_entries(list(SPECIAL_TOKENS) + sorted(student_entries))
    teacher_vocab = SubwordVocab.from_entries(list(SPECIAL_TOKENS) + sorted(teacher_entries))

    answers = [f"answer{i}" for i in range(spec.n_answers)]

    def make_image(image_id: str):
        k = rng.randint(*spec.tags_per_image)
        tags = tuple(rng.sample(tag_words, k))
        features = feature_rng.normal(size=(k, spec.feature_dim)).astype(np.float32)
        return tags, features

    parallel = []
    for i in range(spec.n_parallel):
        length = rng.randint(*spec.question_words)
        idxs = [rng.randrange(spec.lexicon_size) for _ in range(length)]
        tags, features = make_image(f"img{i:05d}")
        answer = answers[idxs[0] % spec.n_answers]
        source = ExampleRecord(
            question_id=f"p{i:05d}-en",
            image_id=f"img{i:05d}",
            question=" ".join(english[j] for j in idxs),
            language="en",
            answers=((answer, 1),),
            tags=tags,
            features=features,
            region_labels=tags,
        )
        target_rec = ExampleRecord(
            question_id=f"p{i:05d}-xx",
            image_id=f"img{i:05d}",
            question=" ".join(target[j] for j in idxs),
            language="xx",
            answers=((answer, 1),),
            tags=tags,
            features=features,
            region_labels=tags,
        )
        alignment = WordAlignment(frozenset((k, k) for k in range(length)))
        parallel.append(ParallelRecord(source=source, target=target_rec, alignment=alignment))

    task = []
    for i in range(spec.n_task):
        length = rng.randint(*spec.question_words)
        idxs = [rng.randrange(spec.lexicon_size) for _ in range(length)]
        tags, features = make_image(f"timg{i:05d}")
        answer = answers[idxs[0] % spec.n_answers]
        count = 10 if spec.annotations_per_question == 10 else 1
        task.append(ExampleRecord(
            question_id=f"t{i:05d}",
            image_id=f"timg{i:05d}",
            question=" ".join(target[j] for j in idxs),
            language="xx",
            answers=((answer, count),),
            tags=tags,
            features=features,
            region_labels=tags,
        ))

    return SynthCorpus(
        student_vocab=student_vocab,
        teacher_vocab=teacher_vocab,
        parallel=tuple(parallel),
        task=tuple(task),
    )
