import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from vlkd.data import SynthSpec, synth_corpus  # noqa: E402
from vlkd.model import ModelConfig, init_model  # noqa: E402


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(
        hidden_size=32,
        num_layers=4,
        num_heads=4,
        vocab_size=vocab_size,
        num_classes=6,
        feature_dim=8,
        max_text_tokens=48,
        max_image_tokens=8,
        dropout=0.0,
        attention_dropout=0.0,
        ffn_size=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(SynthSpec(n_parallel=16, n_task=8, seed=11))


@pytest.fixture(scope="session")
def small_models(small_corpus):
    student = init_model(desk_config(len(small_corpus.student_vocab)), seed=0)
    teacher = init_model(desk_config(len(small_corpus.teacher_vocab)), seed=1)
    return teacher, student
