"""Command-line entry points wiring the pipeline stages together.

One executable with subcommands; every run writes its fully resolved
configuration next to its outputs, and reruns with the same inputs and seeds
overwrite identical files. The output root comes from --out or the
VLKD_OUTPUT_ROOT environment variable (default ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import answers as answers_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import train as train_mod
from .codemix import code_mix
from .distill import DistillationConfig
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .tokenizer import dump_vocab, load_vocab

DESK_MODEL = {
    "hidden_size": 32,
    "num_layers": 4,
    "num_heads": 4,
    "feature_dim": 8,
    "max_text_tokens": 48,
    "max_image_tokens": 8,
    "dropout": 0.0,
    "attention_dropout": 0.0,
    "ffn_size": 64,
}


def _output_root() -> Path:
    return Path(os.environ.get("VLKD_OUTPUT_ROOT", "runs"))


def _resolve_out(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else _output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _echo_config(out_dir: Path, config: dict) -> None:
    (out_dir / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _model_config(overrides: dict, vocab_size: int, num_classes: int) -> ModelConfig:
    merged = {**DESK_MODEL, **overrides, "vocab_size": vocab_size,
              "num_classes": num_classes}
    return ModelConfig(**merged)


def _distill_config(args, num_layers: int) -> DistillationConfig:
    layers = {m for m in (3, 6, 9) if m <= num_layers} | {num_layers}
    if args.last_layer_only:
        layers = {num_layers}
    return DistillationConfig(
        layer_set=tuple(sorted(layers)),
        enable_cls=not args.no_cls,
        enable_img=not args.no_img,
        enable_tag=not args.no_tag,
        enable_cm=not args.no_cm,
    )


def cmd_synth(args) -> int:
    out = _resolve_out(args, "synth")
    spec = data_mod.SynthSpec(
        n_parallel=args.pairs,
        n_task=args.tasks,
        eligible_fraction=args.eligible_fraction,
        annotations_per_question=args.annotations,
        seed=args.seed,
    )
    corpus = data_mod.synth_corpus(spec)
    dump_vocab(corpus.student_vocab, out / "student_vocab.txt")
    dump_vocab(corpus.teacher_vocab, out / "teacher_vocab.txt")
    data_mod.dump_dataset(corpus.parallel, out / "parallel.jsonl")
    data_mod.dump_dataset(corpus.task, out / "task.jsonl")
    _echo_config(out, {"command": "synth", **asdict(spec)})
    print(f"wrote synthetic corpus to {out}")
    return 0


def cmd_vocab(args) -> int:
    out = _resolve_out(args, "vocab")
    records = data_mod.load_dataset(args.data, schema="task")
    multiset = [a for r in records for a, c in r.answers for _ in range(c)]
    vocab = answers_mod.build_answer_vocab(multiset, args.k)
    if args.translations:
        translations = _load_json(args.translations)
        vocab = answers_mod.merge_by_translation(vocab, translations)
    answers_mod.save_answer_vocab(vocab, out / "answers.tsv")
    _echo_config(out, {"command": "vocab", "data": args.data, "k": args.k,
                       "translations": args.translations,
                       "classes": len(vocab), "coverage": vocab.coverage})
    print(f"{len(vocab)} classes, coverage {vocab.coverage:.4f} -> {out / 'answers.tsv'}")
    return 0


def cmd_codemix(args) -> int:
    out = _resolve_out(args, "codemix")
    student_vocab = load_vocab(args.student_vocab)
    teacher_vocab = load_vocab(args.teacher_vocab)
    pairs = data_mod.load_dataset(args.data, schema="parallel")
    rows = []
    for i, pair in enumerate(pairs):
        mixed = code_mix(
            pair.source.question.split(), pair.target.question.split(),
            pair.alignment, student_vocab, teacher_vocab,
            args.ratio, args.seed + i,
        )
        rows.append({
            "question_id": pair.target.question_id,
            "mixed": " ".join(mixed.words),
            "replaced": [[t, s] for t, s in mixed.replaced],
        })
    with open(out / "codemixed.jsonl", "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    _echo_config(out, {"command": "codemix", "data": args.data, "ratio": args.ratio,
                       "seed": args.seed, "sentences": len(rows)})
    print(f"code-mixed {len(rows)} sentences -> {out / 'codemixed.jsonl'}")
    return 0


def cmd_distill(args) -> int:
    out = _resolve_out(args, "distill")
    student_vocab = load_vocab(args.student_vocab)
    teacher_vocab = load_vocab(args.teacher_vocab)
    pairs = data_mod.load_dataset(args.data, schema="parallel")
    overrides = _load_json(args.config)

    if args.teacher:
        teacher, _, _ = load_checkpoint(args.teacher)
        teacher_cfg = teacher.config
    else:
        teacher_cfg = _model_config(
            overrides.get("model", {}), len(teacher_vocab), args.num_classes
        )
        teacher = init_model(teacher_cfg, seed=args.seed + 1)
    student_cfg = _model_config(
        overrides.get("model", {}), len(student_vocab), args.num_classes
    )
    student = init_model(student_cfg, seed=args.seed)

    dcfg = _distill_config(args, student_cfg.num_layers)
    stages = (train_mod.StageConfig(
        "kd", lr=args.lr, steps=args.steps, objective="distillation"),)
    tcfg = train_mod.TrainConfig(
        stages=stages, batch_size=args.batch_size,
        validation_interval=args.validation_interval, seed=args.seed,
    )

    items = data_mod.build_distillation_items(
        pairs, student_vocab, teacher_vocab, student_cfg, args.ratio, args.seed
    )
    record = train_mod.run_kd_stage(teacher, student, items, dcfg, tcfg, out_dir=out)
    if record.best_state is not None:
        student.load_state_dict(record.best_state)
    save_checkpoint(student, out / "student.pt", step=record.best_step,
                    metrics={"best_metric": record.best_metric})
    _echo_config(out, {
        "command": "distill", "data": args.data, "seed": args.seed,
        "model": asdict(student_cfg), "distill": asdict(dcfg),
        "train": asdict(tcfg),
    })
    print(f"distilled student saved to {out / 'student.pt'} "
          f"(best {record.metric_name}={record.best_metric:.6f})")
    return 0


def _run_task_command(args, schedule_name: str) -> int:
    out = _resolve_out(args, schedule_name)
    subword_vocab = load_vocab(args.student_vocab)
    records = data_mod.load_dataset(args.data, schema="task")
    answer_vocab = answers_mod.load_answer_vocab(args.answer_vocab)
    overrides = _load_json(args.config)

    if args.student:
        student, _, _ = load_checkpoint(args.student)
        if student.config.num_classes != len(answer_vocab):
            # The task head is always trained fresh; reshape it to the class set.
            cfg = ModelConfig(**{**asdict(student.config),
                                 "num_classes": len(answer_vocab)})
            fresh = init_model(cfg, seed=args.seed)
            state = student.state_dict()
            fresh_state = fresh.state_dict()
            for key in ("classifier.weight", "classifier.bias"):
                state[key] = fresh_state[key]
            fresh.load_state_dict(state)
            student = fresh
    else:
        cfg = _model_config(overrides.get("model", {}), len(subword_vocab),
                            len(answer_vocab))
        student = init_model(cfg, seed=args.seed)

    stages = (
        train_mod.StageConfig("classifier", lr=args.lr, steps=args.classifier_steps,
                              freeze="all_but_classifier"),
        train_mod.StageConfig("full", lr=args.full_lr, steps=args.full_steps),
    )
    tcfg = train_mod.TrainConfig(
        stages=stages, batch_size=args.batch_size,
        validation_interval=args.validation_interval, seed=args.seed,
        target_mode=args.target_mode,
        eval_metric="vqa_soft" if args.target_mode == "soft" else "exact",
    )
    record = train_mod.run_task_stages(
        student, records, answer_vocab, subword_vocab, tcfg, out_dir=out
    )
    if record.best_state is not None:
        student.load_state_dict(record.best_state)
    save_checkpoint(student, out / "student.pt", step=record.best_step,
                    metrics={"best_metric": record.best_metric})
    _echo_config(out, {
        "command": schedule_name, "data": args.data, "seed": args.seed,
        "model": asdict(student.config), "train": asdict(tcfg),
    })
    print(f"{schedule_name} complete; best {record.metric_name}="
          f"{record.best_metric:.4f} at step {record.best_step}")
    return 0


def cmd_finetune(args) -> int:
    return _run_task_command(args, "finetune")


def cmd_aug(args) -> int:
    return _run_task_command(args, "aug")


def cmd_eval(args) -> int:
    out = _resolve_out(args, "eval")
    subword_vocab = load_vocab(args.student_vocab)
    records = data_mod.load_dataset(args.data, schema="task")
    answer_vocab = answers_mod.load_answer_vocab(args.answer_vocab)
    model, _, _ = load_checkpoint(args.model)

    dataset = train_mod._TaskDataset(records, answer_vocab, subword_vocab, model,
                                     args.target_mode)
    preds = train_mod.predict_classes(model, dataset)
    report = eval_mod.evaluate_predictions(
        preds, records, answer_vocab,
        metric="vqa_soft" if args.target_mode == "soft" else "exact",
        type_rules=eval_mod.JAPANESE_QUESTION_RULES if args.question_types else None,
    )
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as handle:
        for record, pred in zip(records, preds):
            handle.write(json.dumps({
                "question_id": record.question_id,
                "predicted_class": pred,
                "predicted_string": answer_vocab.classes[pred],
            }, sort_keys=True) + "\n")
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _echo_config(out, {"command": "eval", "data": args.data, "model": args.model})
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_export_embeddings(args) -> int:
    out = _resolve_out(args, "embeddings")
    subword_vocab = load_vocab(args.student_vocab)
    records = data_mod.load_dataset(args.data, schema="task")
    model, _, _ = load_checkpoint(args.model)
    layer = args.layer if args.layer else model.config.num_layers
    n = eval_mod.export_embeddings(
        model, records, set(args.tokens.split(",")) if args.tokens else set(),
        layer, out / "embeddings.tsv", subword_vocab,
    )
    _echo_config(out, {"command": "export-embeddings", "data": args.data,
                       "layer": layer, "tokens": args.tokens, "rows": n})
    print(f"exported {n} rows to {out / 'embeddings.tsv'}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="output directory (default under VLKD_OUTPUT_ROOT)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON config file with overrides")


def _add_ablation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-cls", action="store_true",
                        help="disable classification-token distillation")
    parser.add_argument("--no-img", action="store_true",
                        help="disable image-token distillation")
    parser.add_argument("--no-tag", action="store_true",
                        help="disable object-tag distillation")
    parser.add_argument("--no-cm", action="store_true",
                        help="disable code-mixed distillation")
    parser.add_argument("--last-layer-only", action="store_true",
                        help="distill only the last layer (no intermediate layers)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlkd",
        description="Cross-lingual distillation pipelines for a fusion-encoder VQA model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bilingual corpus")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--tasks", type=int, default=32)
    p.add_argument("--eligible-fraction", type=float, default=1.0)
    p.add_argument("--annotations", type=int, default=1, choices=(1, 10))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="build an answer-class vocabulary")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=3000)
    p.add_argument("--translations", help="JSON map answer -> translation to merge by")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("codemix", help="code-switch a parallel corpus")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--ratio", type=float, default=0.15)
    p.set_defaults(func=cmd_codemix)

    p = sub.add_parser("distill", help="knowledge-distillation stage")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--teacher", help="teacher checkpoint (default: seeded random)")
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--validation-interval", type=int, default=500)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_distill)

    for name, helptext in (("finetune", "two-step task fine-tuning"),
                           ("aug", "two-step training on augmented data")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--student-vocab", required=True)
        p.add_argument("--answer-vocab", required=True)
        p.add_argument("--student", help="checkpoint to start from (default: fresh)")
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--full-lr", type=float, default=5e-4)
        p.add_argument("--classifier-steps", type=int, default=200)
        p.add_argument("--full-steps", type=int, default=800)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--validation-interval", type=int, default=500)
        p.add_argument("--target-mode", choices=("single", "soft"), default="single")
        p.set_defaults(func=cmd_finetune if name == "finetune" else cmd_aug)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--answer-vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target-mode", choices=("single", "soft"), default="single")
    p.add_argument("--question-types", action="store_true",
                   help="include the question-type breakdown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump token embeddings to TSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", default="", help="comma-separated subword filter")
    p.add_argument("--layer", type=int, default=0, help="layer index (default: last)")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
