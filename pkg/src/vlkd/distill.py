"""Embedding-matching distillation objectives and their layer-weighted sum.

Four per-layer objectives compare student hidden states against a frozen
teacher: the classification-marker embedding, the image-region embeddings,
matched object-tag subwords, and code-switched question words. Each is a mean
squared error over hidden dimensions; the tag and word objectives sum only
over matched token pairs and normalize by the squared student-side token
count. The combined loss sums the four terms over a configured layer set with
per-layer weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import (
    ROLE_QUESTION,
    ROLE_REGION,
    ROLE_TAG,
    EncoderOutput,
    FusionEncoder,
    WordTagImageTriple,
)
from .tokenizer import AlignmentMatrix

logger = logging.getLogger(__name__)

OBJECTIVES = ("cls", "img", "tag", "cm")


@dataclass(frozen=True)
class DistillationConfig:
    """Layer set, per-layer weights, and per-objective toggles.

    ``layer_set`` defaults to layers {3, 6, 9} intersected with the model
    depth, plus the last layer. Disabling an objective removes it from the
    optimized total; its breakdown contribution is logged as zero while the
    measured value stays available for ablation accounting.
    """

    layer_set: tuple[int, ...]
    layer_weights: dict[int, float] = field(default_factory=dict)
    enable_cls: bool = True
    enable_img: bool = True
    enable_tag: bool = True
    enable_cm: bool = True
    per_match_normalization: bool = False
    two_pass_code_mix: bool = False

    def __post_init__(self):
        layers = tuple(sorted(set(self.layer_set)))
        if not layers:
            raise ValueError("layer_set must be nonempty")
        if layers[0] < 1:
            raise ValueError("layer indices are 1-based")
        object.__setattr__(self, "layer_set", layers)
        weights = {m: float(self.layer_weights.get(m, 1.0)) for m in layers}
        if any(w < 0 for w in weights.values()):
            raise ValueError("layer weights must be >= 0")
        object.__setattr__(self, "layer_weights", weights)

    @classmethod
    def default_for(cls, num_layers: int, **kwargs) -> "DistillationConfig":
        layers = {m for m in (3, 6, 9) if m <= num_layers} | {num_layers}
        return cls(layer_set=tuple(sorted(layers)), **kwargs)

    def enabled(self, objective: str) -> bool:
        return getattr(self, f"enable_{objective}")

    def validate_for(self, teacher: FusionEncoder, student: FusionEncoder) -> None:
        if teacher.config.hidden_size != student.config.hidden_size:
            raise ValueError(
                "teacher and student hidden sizes differ "
                f"({teacher.config.hidden_size} vs {student.config.hidden_size}); "
                "projection between sizes is unsupported"
            )
        depth = min(teacher.config.num_layers, student.config.num_layers)
        if self.layer_set[-1] > depth:
            raise ValueError(
                f"layer_set {self.layer_set} exceeds model depth {depth}"
            )


@dataclass(frozen=True)
class DistillationBatchItem:
    """One parallel example prepared for distillation.

    The teacher consumes the English side, the student the (possibly
    code-switched) target side; both share the image regions bit for bit.
    ``tag_matrix`` and ``word_matrix`` are binary (student x teacher) match
    matrices over tag and question subword positions respectively.
    ``student_plain_input`` carries the unmixed target sentence for the
    optional two-pass variant.
    """

    teacher_input: WordTagImageTriple
    student_input: WordTagImageTriple
    tag_matrix: AlignmentMatrix
    word_matrix: AlignmentMatrix
    student_plain_input: WordTagImageTriple | None = None

    def __post_init__(self):
        if not np.array_equal(self.teacher_input.regions.vectors,
                              self.student_input.regions.vectors):
            raise ValueError("teacher and student must share identical region features")
        # The tag objective reads the plain pass when one is supplied.
        tag_side = self.student_plain_input or self.student_input
        s_tags = sum(len(t) for t in tag_side.tags)
        t_tags = sum(len(t) for t in self.teacher_input.tags)
        if self.tag_matrix.shape != (s_tags, t_tags):
            raise ValueError(
                f"tag_matrix shape {self.tag_matrix.shape} != ({s_tags}, {t_tags})"
            )
        if self.word_matrix.shape != (len(self.student_input.question),
                                      len(self.teacher_input.question)):
            raise ValueError(
                f"word_matrix shape {self.word_matrix.shape} != "
                f"({len(self.student_input.question)}, {len(self.teacher_input.question)})"
            )


@dataclass
class LossTerm:
    layer: int
    objective: str
    value: float      # contribution to the optimized total (0 when disabled)
    measured: float   # evaluated value regardless of the enable flag


@dataclass
class LossBreakdown:
    """Total distillation loss with per-(layer, objective) terms."""

    total: torch.Tensor
    terms: list[LossTerm]

    def term_sum(self, objective: str, measured: bool = False) -> float:
        return sum(
            (t.measured if measured else t.value)
            for t in self.terms if t.objective == objective
        )

    def layers(self) -> list[int]:
        return sorted({t.layer for t in self.terms})


def _token_mse(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Per-token MSE over hidden dimensions; inputs are (k, hidden)."""
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    return ((student - teacher) ** 2).mean(dim=-1)


def loss_cls(student_cls: torch.Tensor, teacher_cls: torch.Tensor) -> torch.Tensor:
    """MSE between the two classification-marker embeddings."""
    if student_cls.shape != teacher_cls.shape:
        raise ValueError(
            f"CLS dimension mismatch: {tuple(student_cls.shape)} vs {tuple(teacher_cls.shape)}"
        )
    return ((student_cls - teacher_cls) ** 2).mean()


def loss_img(student_img: torch.Tensor, teacher_img: torch.Tensor) -> torch.Tensor:
    """Mean over image tokens of the per-token MSE; 0 for imageless input."""
    if student_img.shape[0] == 0:
        logger.debug("loss_img over zero image tokens; returning 0")
        return student_img.new_zeros(())
    return _token_mse(student_img, teacher_img).mean()


def _matched_pair_loss(
    student: torch.Tensor,
    teacher: torch.Tensor,
    match: AlignmentMatrix,
    count: int,
    per_match: bool,
) -> torch.Tensor:
    if match.shape != (student.shape[0], teacher.shape[0]):
        raise ValueError(
            f"match matrix shape {match.shape} != ({student.shape[0]}, {teacher.shape[0]})"
        )
    rows, cols = np.nonzero(match)
    if len(rows) == 0 or count == 0:
        return student.new_zeros(())
    pair_mse = ((student[rows] - teacher[cols]) ** 2).mean(dim=-1)
    denom = len(rows) if per_match else count * count
    return pair_mse.sum() / denom


def loss_tag(
    student_tags: torch.Tensor,
    teacher_tags: torch.Tensor,
    match: AlignmentMatrix,
    tag_count: int,
    *,
    per_match: bool = False,
) -> torch.Tensor:
    """Matched-subword MSE over object tags, normalized by tag_count**2.

    ``tag_count`` is the student-side tag token count. ``per_match=True``
    switches to normalizing by the number of matched pairs instead.
    """
    return _matched_pair_loss(student_tags, teacher_tags, match, tag_count, per_match)


def loss_cm(
    student_words: torch.Tensor,
    teacher_words: torch.Tensor,
    match: AlignmentMatrix,
    word_count: int,
    *,
    per_match: bool = False,
) -> torch.Tensor:
    """Matched code-switched word MSE, normalized by word_count**2.

    Zero whenever the sentence had no replacements (all-zero match matrix).
    """
    return _matched_pair_loss(student_words, teacher_words, match, word_count, per_match)


def loss_distil(
    item: DistillationBatchItem,
    teacher_out: EncoderOutput,
    student_out: EncoderOutput,
    cfg: DistillationConfig,
    student_plain_out: EncoderOutput | None = None,
) -> LossBreakdown:
    """Layer-weighted sum of the four objectives with a full breakdown.

    Every (layer, objective) pair is evaluated and logged via ``measured``;
    only enabled objectives enter the differentiable total (disabled terms log
    a zero ``value``). With ``cfg.two_pass_code_mix`` and a plain-sentence
    student pass supplied, the cls/img/tag terms read the plain pass and only
    the code-mixed objective reads the mixed pass.
    """
    for m in cfg.layer_set:
        if m not in teacher_out.layers or m not in student_out.layers:
            raise ValueError(f"layer {m} not retained in both encoder outputs")
    base_out = student_out
    tag_side = item.student_input
    if cfg.two_pass_code_mix and student_plain_out is not None:
        base_out = student_plain_out
        tag_side = item.student_plain_input or item.student_input

    total = None
    terms: list[LossTerm] = []
    tag_count = sum(len(t) for t in tag_side.tags)
    word_count = len(item.student_input.question)
    for m in cfg.layer_set:
        weight = cfg.layer_weights[m]

        def compute(objective: str) -> torch.Tensor:
            if objective == "cls":
                return loss_cls(base_out.cls_vector(m), teacher_out.cls_vector(m))
            if objective == "img":
                return loss_img(
                    base_out.vectors(m, ROLE_REGION), teacher_out.vectors(m, ROLE_REGION)
                )
            if objective == "tag":
                return loss_tag(
                    base_out.vectors(m, ROLE_TAG),
                    teacher_out.vectors(m, ROLE_TAG),
                    item.tag_matrix,
                    tag_count,
                    per_match=cfg.per_match_normalization,
                )
            return loss_cm(
                student_out.vectors(m, ROLE_QUESTION),
                teacher_out.vectors(m, ROLE_QUESTION),
                item.word_matrix,
                word_count,
                per_match=cfg.per_match_normalization,
            )

        for objective in OBJECTIVES:
            if cfg.enabled(objective):
                term = compute(objective)
                measured = float(term.detach())
                contribution = weight * term
                total = contribution if total is None else total + contribution
                terms.append(LossTerm(m, objective, measured, measured))
            else:
                with torch.no_grad():
                    measured = float(compute(objective))
                terms.append(LossTerm(m, objective, 0.0, measured))

    if total is None:
        ref = student_out.layer(cfg.layer_set[0])
        total = ref.new_zeros(())
    return LossBreakdown(total=total, terms=terms)


def distill_batch(
    items: Sequence[DistillationBatchItem],
    teacher: FusionEncoder,
    student: FusionEncoder,
    cfg: DistillationConfig,
    training: bool = False,
) -> list[LossBreakdown]:
    """Forward a batch through both models and score every item."""
    if not items:
        raise ValueError("empty distillation batch")
    cfg.validate_for(teacher, student)
    retain = cfg.layer_set
    with torch.no_grad():
        teacher_outs = teacher.encode([i.teacher_input for i in items], retain)
    student_outs = student.encode([i.student_input for i in items], retain, training=training)
    plain_outs: list[EncoderOutput | None] = [None] * len(items)
    if cfg.two_pass_code_mix:
        plain_triples = [i.student_plain_input or i.student_input for i in items]
        plain_list = student.encode(plain_triples, retain, training=training)
        plain_outs = list(plain_list)
    return [
        loss_distil(item, t_out, s_out, cfg, student_plain_out=p_out)
        for item, t_out, s_out, p_out in zip(items, teacher_outs, student_outs, plain_outs)
    ]


def kd_objective(
    items: Sequence[DistillationBatchItem],
    teacher: FusionEncoder,
    student: FusionEncoder,
    cfg: DistillationConfig,
    batch_size: int = 16,
) -> torch.Tensor:
    """Mean distillation loss over a dataset (teacher held fixed).

    The optimized quantity is the per-example mean; multiply by the dataset
    size to recover the summed objective.
    """
    if not items:
        raise ValueError("kd_objective over an empty dataset")
    total = None
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        for breakdown in distill_batch(chunk, teacher, student, cfg):
            total = breakdown.total if total is None else total + breakdown.total
    return total / len(items)
