import copy
import json

import pytest
import torch

from conftest import desk_config
from vlkd.answers import build_answer_vocab
from vlkd.data import SynthSpec, build_distillation_items, synth_corpus
from vlkd.distill import DistillationConfig
from vlkd.model import init_model
from vlkd.train import (
    RunRecord,
    StageConfig,
    TrainConfig,
    make_optimizer,
    reference_aug_stages,
    reference_finetune_stages,
    reference_kd_stages,
    run_aug_stage,
    run_finetune_stage,
    run_kd_stage,
    run_task_stages,
)


@pytest.fixture(scope="module")
def world():
    corpus = synth_corpus(SynthSpec(n_parallel=12, n_task=12, seed=4))
    cfg_s = desk_config(len(corpus.student_vocab))
    cfg_t = desk_config(len(corpus.teacher_vocab))
    items = build_distillation_items(
        corpus.parallel, corpus.student_vocab, corpus.teacher_vocab, cfg_s,
        ratio=0.15, base_seed=0,
    )
    answers = [a for r in corpus.task for a, _ in r.answers]
    vocab = build_answer_vocab(answers, k=len(set(answers)))
    return corpus, cfg_s, cfg_t, items, vocab


def kd_config(steps, lr=1e-3, interval=500, seed=0):
    return TrainConfig(
        stages=(StageConfig("kd", lr=lr, steps=steps, objective="distillation"),),
        batch_size=4, validation_interval=interval, seed=seed,
    )


def task_config(cls_steps, full_steps, interval=500, seed=0, lr=1e-3, full_lr=5e-4):
    return TrainConfig(
        stages=(
            StageConfig("classifier", lr=lr, steps=cls_steps,
                        freeze="all_but_classifier"),
            StageConfig("full", lr=full_lr, steps=full_steps),
        ),
        batch_size=4, validation_interval=interval, seed=seed,
    )


class TestStageConfig:
    def test_needs_exactly_one_budget(self):
        with pytest.raises(ValueError):
            StageConfig("s", lr=1e-3)
        with pytest.raises(ValueError):
            StageConfig("s", lr=1e-3, epochs=1, steps=5)

    def test_positive_lr(self):
        with pytest.raises(ValueError):
            StageConfig("s", lr=0.0, epochs=1)

    def test_reference_presets(self):
        (kd,) = reference_kd_stages()
        assert kd.epochs == 10 and kd.lr == 1e-4 and kd.objective == "distillation"
        head, full = reference_finetune_stages()
        assert head.epochs == 5 and head.lr == 1e-4
        assert head.freeze == "all_but_classifier"
        assert full.epochs == 15 and full.lr == 5e-5
        head, full = reference_aug_stages()
        assert full.epochs == 25


class TestKdStage:
    def test_zero_steps_leaves_student_unchanged(self, world):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        before = copy.deepcopy(student.state_dict())
        run_kd_stage(teacher, student, items, DistillationConfig.default_for(4),
                     kd_config(steps=0))
        after = student.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_teacher_bit_identical_after_training(self, world):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        before = copy.deepcopy(teacher.state_dict())
        run_kd_stage(teacher, student, items, DistillationConfig.default_for(4),
                     kd_config(steps=12))
        after = teacher.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_loss_decreases(self, world):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        record = run_kd_stage(teacher, student, items,
                              DistillationConfig.default_for(4), kd_config(steps=60))
        assert -record.final_validation["metric"] < -record.initial_metric

    def test_validation_fires_on_exact_multiples(self, world, tmp_path):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        record = run_kd_stage(teacher, student, items,
                              DistillationConfig.default_for(4),
                              kd_config(steps=13, interval=5), out_dir=tmp_path)
        assert [v["step"] for v in record.validations] == [5, 10]
        assert record.final_validation["step"] == 13
        record.check_invariants()
        assert (tmp_path / "breakdown.jsonl").exists()
        assert (tmp_path / "summary.json").exists()

    def test_logged_total_equals_weighted_term_sum(self, world, tmp_path):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        dcfg = DistillationConfig.default_for(4, enable_tag=False)
        run_kd_stage(teacher, student, items, dcfg, kd_config(steps=6),
                     out_dir=tmp_path)
        steps = [json.loads(l) for l in (tmp_path / "steps.jsonl").read_text().splitlines()]
        rows = [json.loads(l) for l in (tmp_path / "breakdown.jsonl").read_text().splitlines()]
        for s in steps:
            mine = [r for r in rows if r["step"] == s["step"]]
            assert mine
            total = sum(dcfg.layer_weights[r["layer"]] * r["value"] for r in mine)
            assert s["loss"] == pytest.approx(total, abs=1e-9)
            assert all(r["value"] == 0.0 for r in mine if r["objective"] == "tag")
            assert any(r["measured"] != 0.0 for r in mine if r["objective"] == "tag")

    def test_reproducible_given_seed(self, world):
        corpus, cfg_s, cfg_t, items, _ = world
        losses = []
        for _ in range(2):
            teacher = init_model(cfg_t, seed=1)
            student = init_model(cfg_s, seed=0)
            record = run_kd_stage(teacher, student, items,
                                  DistillationConfig.default_for(4),
                                  kd_config(steps=10, seed=123))
            losses.append([s["loss"] for s in record.steps])
        assert losses[0] == losses[1]

    def test_non_finite_loss_aborts_with_snapshot(self, world, tmp_path):
        corpus, cfg_s, cfg_t, items, _ = world
        teacher = init_model(cfg_t, seed=1)
        student = init_model(cfg_s, seed=0)
        with torch.no_grad():
            student.word_embeddings.weight[0, 0] = float("nan")
        with pytest.raises(FloatingPointError):
            run_kd_stage(teacher, student, items, DistillationConfig.default_for(4),
                         kd_config(steps=3), out_dir=tmp_path)
        assert (tmp_path / "diagnostic.json").exists()


class TestTaskStages:
    def test_classifier_stage_freezes_everything_else(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        before = copy.deepcopy(student.state_dict())
        run_task_stages(student, corpus.task, vocab, corpus.student_vocab,
                        task_config(cls_steps=8, full_steps=0))
        after = student.state_dict()
        for key in before:
            if key.startswith("classifier."):
                assert not torch.equal(before[key], after[key])
            else:
                assert torch.equal(before[key], after[key])

    def test_full_stage_updates_encoder(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        before = copy.deepcopy(student.state_dict())
        run_task_stages(student, corpus.task, vocab, corpus.student_vocab,
                        task_config(cls_steps=0, full_steps=8))
        assert not torch.equal(before["word_embeddings.weight"],
                               student.state_dict()["word_embeddings.weight"])

    def test_validation_step_sequence_spans_stages(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        record = run_task_stages(student, corpus.task, vocab, corpus.student_vocab,
                                 task_config(cls_steps=7, full_steps=8, interval=5))
        assert [v["step"] for v in record.validations] == [5, 10, 15]
        assert record.final_validation is not None
        record.check_invariants()

    def test_best_checkpoint_tracks_max_metric(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        record = run_task_stages(student, corpus.task, vocab, corpus.student_vocab,
                                 task_config(cls_steps=6, full_steps=30, interval=6))
        assert record.best_metric == max(record.recorded_metrics())
        assert record.best_state is not None

    def test_memorizes_separable_task(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        record = run_task_stages(student, corpus.task, vocab, corpus.student_vocab,
                                 task_config(cls_steps=30, full_steps=250, interval=500))
        assert record.final_validation["metric"] >= 0.95

    def test_empty_dataset_rejected(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        with pytest.raises(ValueError):
            run_finetune_stage(student, [], vocab, corpus.student_vocab,
                               task_config(cls_steps=1, full_steps=1))

    def test_aug_then_finetune_composition(self, world):
        corpus, cfg_s, _, _, vocab = world
        student = init_model(desk_config(len(corpus.student_vocab),
                                         num_classes=len(vocab)), seed=0)
        aug_record = run_aug_stage(student, corpus.task, vocab, corpus.student_vocab,
                                   task_config(cls_steps=4, full_steps=4))
        ft_record = run_finetune_stage(student, corpus.task, vocab,
                                       corpus.student_vocab,
                                       task_config(cls_steps=4, full_steps=4))
        assert aug_record.steps and ft_record.steps


class TestOptimizerContract:
    def test_zero_gradient_changes_param_only_by_decay(self, world):
        corpus, cfg_s, _, _, _ = world
        model = init_model(cfg_s, seed=0)
        cfg = TrainConfig(stages=(StageConfig("s", lr=1e-2, steps=1),),
                          weight_decay=0.05)
        optimizer = make_optimizer(model, lr=1e-2, cfg=cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        optimizer.step()
        for name, p in model.named_parameters():
            expected = before[name] * (1 - 1e-2 * 0.05)
            assert torch.allclose(p.detach(), expected, rtol=0, atol=0), name

    def test_adamw_hyperparameters_from_config(self, world):
        corpus, cfg_s, _, _, _ = world
        model = init_model(cfg_s, seed=0)
        cfg = TrainConfig(stages=(StageConfig("s", lr=1e-3, steps=1),))
        optimizer = make_optimizer(model, lr=1e-3, cfg=cfg)
        group = optimizer.param_groups[0]
        assert group["eps"] == 1e-8
        assert group["betas"] == (0.9, 0.999)
        assert group["weight_decay"] == 0.05


class TestRunRecord:
    def test_invariant_violation_detected(self):
        record = RunRecord(metric_name="m")
        record.validations.append({"step": 1, "metric": 0.9, "metric_name": "m"})
        record.best_metric = 0.1
        with pytest.raises(AssertionError):
            record.check_invariants()
