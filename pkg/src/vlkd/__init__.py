"""Cross-lingual knowledge distillation for a fusion-encoder VQA model."""

from .answers import (
    AnswerVocabulary,
    build_answer_vocab,
    coverage,
    encode_targets,
    merge_by_translation,
)
from .codemix import (
    CodeMixedSentence,
    WordAlignment,
    code_mix,
    eligible_words,
    load_alignments,
)
from .data import (
    ExampleRecord,
    ParallelRecord,
    SynthSpec,
    assemble_triple,
    build_distillation_items,
    load_dataset,
    synth_corpus,
)
from .distill import (
    DistillationBatchItem,
    DistillationConfig,
    kd_objective,
    loss_cls,
    loss_cm,
    loss_distil,
    loss_img,
    loss_tag,
)
from .evaluation import (
    accuracy_exact,
    accuracy_vqa_soft,
    bleu,
    export_embeddings,
    question_type_breakdown,
)
from .model import (
    EncoderOutput,
    FusionEncoder,
    ModelConfig,
    RegionFeatures,
    WordTagImageTriple,
    classify,
    forward,
    gradients,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .tokenizer import (
    SubwordVocab,
    TokenizedText,
    load_vocab,
    match_matrix,
    tokenize,
)
from .train import (
    RunRecord,
    StageConfig,
    TrainConfig,
    run_aug_stage,
    run_finetune_stage,
    run_kd_stage,
)

__version__ = "0.1.0"
