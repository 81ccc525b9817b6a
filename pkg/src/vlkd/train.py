"""Training schedules: the distillation stage and the two-step task stages.

The distillation stage optimizes the layer-weighted embedding-matching loss
against a frozen teacher. Task stages run classifier-only fine-tuning first,
then full-model fine-tuning; the augmentation pipeline reuses the same
machinery on a synthetic translated dataset with its own epoch budget.
Checkpoint selection follows the highest validation metric; the distillation
stage, which has no accuracy, selects by lowest validation loss (recorded
negated so "highest metric" stays the single rule).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .answers import AnswerVocabulary, encode_targets
from .data import ExampleRecord, assemble_triple
from .distill import DistillationBatchItem, DistillationConfig, distill_batch
from .evaluation import accuracy_exact, accuracy_vqa_soft
from .model import (
    FusionEncoder,
    classify,
    freeze,
    freeze_all_but_classifier,
    trainable_parameters,
    unfreeze,
)
from .tokenizer import SubwordVocab

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageConfig:
    """One schedule stage; give either epochs or an explicit step count."""

    name: str
    lr: float
    epochs: int | None = None
    steps: int | None = None
    freeze: str = "none"            # "none" | "all_but_classifier"
    objective: str = "task"         # "task" | "distillation"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if (self.epochs is None) == (self.steps is None):
            raise ValueError("give exactly one of epochs or steps")
        if self.freeze not in ("none", "all_but_classifier"):
            raise ValueError(f"unknown freeze mode {self.freeze!r}")
        if self.objective not in ("task", "distillation"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def total_steps(self, steps_per_epoch: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * steps_per_epoch


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StageConfig, ...]
    batch_size: int = 8
    validation_interval: int = 500
    seed: int = 0
    adam_eps: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    target_mode: str = "single"     # "single" | "soft"
    eval_metric: str = "exact"      # "exact" | "vqa_soft"

    def __post_init__(self):
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def reference_kd_stages() -> tuple[StageConfig, ...]:
    """Full-scale distillation schedule: 10 epochs at 1e-4."""
    return (StageConfig("kd", lr=1e-4, epochs=10, objective="distillation"),)


def reference_finetune_stages() -> tuple[StageConfig, ...]:
    """Classifier-only 5 epochs at 1e-4, then full model 15 epochs at 5e-5."""
    return (
        StageConfig("classifier", lr=1e-4, epochs=5, freeze="all_but_classifier"),
        StageConfig("full", lr=5e-5, epochs=15),
    )


def reference_aug_stages() -> tuple[StageConfig, ...]:
    """Augmented-data schedule: classifier-only 5 epochs, full model 25 epochs."""
    return (
        StageConfig("classifier", lr=1e-4, epochs=5, freeze="all_but_classifier"),
        StageConfig("full", lr=5e-5, epochs=25),
    )


@dataclass
class RunRecord:
    """Everything a run logged: per-step losses, validations, best checkpoint.

    Validation metrics are stored higher-is-better; ``best_metric`` equals
    the max over all recorded validations (interval-triggered plus the final
    one). ``best_state`` holds a deep copy of the best parameters.
    """

    metric_name: str
    config_echo: dict = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    breakdown: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    final_validation: dict | None = None
    initial_metric: float | None = None
    best_step: int = -1
    best_metric: float = -math.inf
    best_state: dict | None = None

    def record_step(self, step: int, stage: str, loss: float) -> None:
        self.steps.append({"step": step, "stage": stage, "loss": loss})

    def record_breakdown(self, step: int, terms: list[dict]) -> None:
        self.breakdown.extend({"step": step, **t} for t in terms)

    def record_validation(self, step: int, metric: float, model: FusionEncoder,
                          final: bool = False) -> None:
        entry = {"step": step, "metric": metric, "metric_name": self.metric_name}
        if final:
            self.final_validation = entry
        else:
            self.validations.append(entry)
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_step = step
            self.best_state = copy.deepcopy(model.state_dict())

    def recorded_metrics(self) -> list[float]:
        metrics = [v["metric"] for v in self.validations]
        if self.final_validation is not None:
            metrics.append(self.final_validation["metric"])
        return metrics

    def check_invariants(self) -> None:
        metrics = self.recorded_metrics()
        if metrics and self.best_metric != max(metrics):
            raise AssertionError("best_metric out of sync with validation history")

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "steps.jsonl", "w", encoding="utf-8") as handle:
            for row in self.steps:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out / "breakdown.jsonl", "w", encoding="utf-8") as handle:
            for row in self.breakdown:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out / "validations.jsonl", "w", encoding="utf-8") as handle:
            for row in self.validations:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
        summary = {
            "metric_name": self.metric_name,
            "initial_metric": self.initial_metric,
            "best_step": self.best_step,
            "best_metric": self.best_metric if self.best_metric > -math.inf else None,
            "final_validation": self.final_validation,
            "config": self.config_echo,
        }
        (out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def make_optimizer(model: FusionEncoder, lr: float, cfg: TrainConfig) -> torch.optim.AdamW:
    """Decoupled-weight-decay Adam over the currently trainable parameters."""
    return torch.optim.AdamW(
        trainable_parameters(model),
        lr=lr,
        eps=cfg.adam_eps,
        betas=cfg.adam_betas,
        weight_decay=cfg.weight_decay,
    )


def _apply_freeze(model: FusionEncoder, mode: str) -> None:
    if mode == "all_but_classifier":
        freeze_all_but_classifier(model)
    else:
        unfreeze(model)


def _epoch_order(n: int, rng: random.Random) -> list[int]:
    order = list(range(n))
    rng.shuffle(order)
    return order


def _abort_non_finite(loss: torch.Tensor, step: int, stage: str,
                      out_dir: str | Path | None) -> None:
    snapshot = {"step": step, "stage": stage, "loss": repr(float(loss.detach()))}
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "diagnostic.json").write_text(json.dumps(snapshot, indent=2))
    raise FloatingPointError(f"non-finite loss at step {step} of stage {stage!r}: {snapshot}")


def evaluate_distillation(
    items: Sequence[DistillationBatchItem],
    teacher: FusionEncoder,
    student: FusionEncoder,
    dcfg: DistillationConfig,
    batch_size: int = 16,
) -> float:
    """Mean distillation loss over a dataset, dropout off, no gradients."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            for b in distill_batch(chunk, teacher, student, dcfg):
                total += float(b.total)
    return total / len(items)


def run_kd_stage(
    teacher: FusionEncoder,
    student: FusionEncoder,
    items: Sequence[DistillationBatchItem],
    dcfg: DistillationConfig,
    cfg: TrainConfig,
    val_items: Sequence[DistillationBatchItem] | None = None,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Optimize the student on the combined distillation loss only.

    The teacher is frozen and left untouched. Validation (every
    ``validation_interval`` steps, on ``val_items`` or the training items)
    records the negated mean distillation loss so checkpoint selection keeps
    maximizing.
    """
    if not items:
        raise ValueError("run_kd_stage needs a nonempty dataset")
    dcfg.validate_for(teacher, student)
    stage = next((s for s in cfg.stages if s.objective == "distillation"), None)
    if stage is None:
        raise ValueError("TrainConfig has no distillation stage")

    freeze(teacher)
    teacher.eval()
    unfreeze(student)

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    val = list(val_items) if val_items is not None else list(items)

    record = RunRecord(
        metric_name="neg_distill_loss",
        config_echo={"train": asdict(cfg), "distill": asdict(dcfg)},
    )
    # Same higher-is-better convention as the validations: negated mean loss.
    record.initial_metric = -evaluate_distillation(val, teacher, student, dcfg)

    steps_per_epoch = max(1, math.ceil(len(items) / cfg.batch_size))
    total_steps = stage.total_steps(steps_per_epoch)
    optimizer = make_optimizer(student, stage.lr, cfg)
    logger.info("distillation stage: %d steps over %d pairs (lr %g, initial loss %.4f)",
                total_steps, len(items), stage.lr, -record.initial_metric)

    step = 0
    order: list[int] = []
    while step < total_steps:
        if not order:
            order = _epoch_order(len(items), rng)
        batch_idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = [items[i] for i in batch_idx]

        breakdowns = distill_batch(batch, teacher, student, dcfg, training=True)
        loss = torch.stack([b.total for b in breakdowns]).mean()
        if not torch.isfinite(loss):
            _abort_non_finite(loss, step + 1, stage.name, out_dir)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        step += 1

        # Log the loss re-accumulated from the breakdown terms so the logged
        # total equals the weighted term sum exactly (ablation accounting).
        terms = _mean_breakdown(breakdowns)
        logged_loss = sum(
            dcfg.layer_weights[t["layer"]] * t["value"] for t in terms
        )
        record.record_step(step, stage.name, logged_loss)
        record.record_breakdown(step, terms)
        if step % cfg.validation_interval == 0:
            metric = -evaluate_distillation(val, teacher, student, dcfg)
            record.record_validation(step, metric, student)

    final_metric = -evaluate_distillation(val, teacher, student, dcfg)
    if not (total_steps and total_steps % cfg.validation_interval == 0):
        record.record_validation(step, final_metric, student, final=True)
    record.final_validation = record.final_validation or {
        "step": step, "metric": final_metric, "metric_name": record.metric_name,
    }
    record.check_invariants()
    if out_dir is not None:
        record.save(out_dir)
    return record


def _mean_breakdown(breakdowns) -> list[dict]:
    """Average each (layer, objective) term over the batch items."""
    sums: dict[tuple[int, str], list[float]] = {}
    for b in breakdowns:
        for term in b.terms:
            key = (term.layer, term.objective)
            acc = sums.setdefault(key, [0.0, 0.0])
            acc[0] += term.value
            acc[1] += term.measured
    n = len(breakdowns)
    return [
        {"layer": layer, "objective": obj, "value": acc[0] / n, "measured": acc[1] / n}
        for (layer, obj), acc in sorted(sums.items())
    ]


class _TaskDataset:
    """Pre-assembled triples and targets for task training."""

    def __init__(self, records: Sequence[ExampleRecord], answer_vocab: AnswerVocabulary,
                 subword_vocab: SubwordVocab, model: FusionEncoder, mode: str):
        self.records = list(records)
        self.triples = [assemble_triple(r, subword_vocab, model.config) for r in self.records]
        self.targets = []
        self.covered = []
        for r in self.records:
            vec, ok = encode_targets(list(r.answers), answer_vocab, mode)
            self.targets.append(torch.as_tensor(vec))
            self.covered.append(ok)
        self.mode = mode
        # Single-label cross-entropy is undefined without a class: skip those.
        self.trainable_idx = [
            i for i in range(len(self.records)) if mode == "soft" or self.covered[i]
        ]

    def __len__(self) -> int:
        return len(self.records)


def _task_loss(model: FusionEncoder, dataset: _TaskDataset, idx: list[int],
               training: bool) -> torch.Tensor:
    last = model.config.num_layers
    outs = model.encode([dataset.triples[i] for i in idx], [last], training=training)
    logits = torch.stack([classify(model, o) for o in outs])
    targets = torch.stack([dataset.targets[i] for i in idx]).to(logits.dtype)
    if dataset.mode == "single":
        return nn.functional.cross_entropy(logits, targets.argmax(dim=1))
    return nn.functional.binary_cross_entropy_with_logits(logits, targets)


def predict_classes(model: FusionEncoder, dataset: _TaskDataset,
                    batch_size: int = 32) -> list[int]:
    preds = []
    last = model.config.num_layers
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            triples = dataset.triples[start : start + batch_size]
            outs = model.encode(triples, [last])
            logits = torch.stack([classify(model, o) for o in outs])
            preds.extend(int(i) for i in logits.argmax(dim=1))
    return preds


def _task_accuracy(model: FusionEncoder, dataset: _TaskDataset,
                   answer_vocab: AnswerVocabulary, metric: str) -> float:
    preds = predict_classes(model, dataset)
    if metric == "vqa_soft":
        annotations = [
            [a for a, c in r.answers for _ in range(c)] for r in dataset.records
        ]
        return accuracy_vqa_soft(preds, annotations, answer_vocab)
    references = [r.answers[0][0] for r in dataset.records]
    return accuracy_exact(preds, references, answer_vocab)


def run_task_stages(
    student: FusionEncoder,
    records: Sequence[ExampleRecord],
    answer_vocab: AnswerVocabulary,
    subword_vocab: SubwordVocab,
    cfg: TrainConfig,
    stages: Sequence[StageConfig] | None = None,
    val_records: Sequence[ExampleRecord] | None = None,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Run the task sub-stages in order with a continuous global step counter."""
    if not records:
        raise ValueError("task training needs a nonempty dataset")
    stages = list(stages if stages is not None else cfg.stages)
    task_stages = [s for s in stages if s.objective == "task"]
    if not task_stages:
        raise ValueError("no task stages configured")

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    dataset = _TaskDataset(records, answer_vocab, subword_vocab, student, cfg.target_mode)
    if not dataset.trainable_idx:
        raise ValueError("no trainable examples (every answer uncovered)")
    val_dataset = (
        _TaskDataset(val_records, answer_vocab, subword_vocab, student, cfg.target_mode)
        if val_records is not None else dataset
    )

    record = RunRecord(
        metric_name=f"val_accuracy_{cfg.eval_metric}",
        config_echo={"train": asdict(cfg), "stages": [asdict(s) for s in stages]},
    )

    step = 0
    for stage in task_stages:
        _apply_freeze(student, stage.freeze)
        optimizer = make_optimizer(student, stage.lr, cfg)
        steps_per_epoch = max(1, math.ceil(len(dataset.trainable_idx) / cfg.batch_size))
        stage_steps = stage.total_steps(steps_per_epoch)
        logger.info("stage %r: %d steps over %d examples (lr %g, freeze=%s)",
                    stage.name, stage_steps, len(dataset.trainable_idx),
                    stage.lr, stage.freeze)

        order: list[int] = []
        done = 0
        while done < stage_steps:
            if not order:
                order = [dataset.trainable_idx[i]
                         for i in _epoch_order(len(dataset.trainable_idx), rng)]
            batch_idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            loss = _task_loss(student, dataset, batch_idx, training=True)
            if not torch.isfinite(loss):
                _abort_non_finite(loss, step + 1, stage.name, out_dir)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            done += 1
            step += 1

            record.record_step(step, stage.name, float(loss.detach()))
            if step % cfg.validation_interval == 0:
                metric = _task_accuracy(student, val_dataset, answer_vocab, cfg.eval_metric)
                record.record_validation(step, metric, student)

    final_metric = _task_accuracy(student, val_dataset, answer_vocab, cfg.eval_metric)
    if not (step and step % cfg.validation_interval == 0):
        record.record_validation(step, final_metric, student, final=True)
    record.final_validation = record.final_validation or {
        "step": step, "metric": final_metric, "metric_name": record.metric_name,
    }
    unfreeze(student)
    record.check_invariants()
    if out_dir is not None:
        record.save(out_dir)
    return record


def run_finetune_stage(
    student: FusionEncoder,
    records: Sequence[ExampleRecord],
    answer_vocab: AnswerVocabulary,
    subword_vocab: SubwordVocab,
    cfg: TrainConfig,
    val_records: Sequence[ExampleRecord] | None = None,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Two-step fine-tuning on the real dataset (classifier-only, then full)."""
    return run_task_stages(
        student, records, answer_vocab, subword_vocab, cfg,
        val_records=val_records, out_dir=out_dir,
    )


def run_aug_stage(
    student: FusionEncoder,
    synthetic_records: Sequence[ExampleRecord],
    answer_vocab: AnswerVocabulary,
    subword_vocab: SubwordVocab,
    cfg: TrainConfig,
    val_records: Sequence[ExampleRecord] | None = None,
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Same machinery as fine-tuning, but on the synthetic translated dataset."""
    return run_task_stages(
        student, synthetic_records, answer_vocab, subword_vocab, cfg,
        val_records=val_records, out_dir=out_dir,
    )
