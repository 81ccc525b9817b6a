import numpy as np
import pytest
import torch

from conftest import desk_config
from vlkd.data import SynthSpec, assemble_triple, synth_corpus
from vlkd.distill import loss_cls
from vlkd.model import (
    FusionEncoder,
    ModelConfig,
    RegionFeatures,
    WordTagImageTriple,
    classify,
    forward,
    freeze_all_but_classifier,
    gradients,
    init_model,
    load_checkpoint,
    save_checkpoint,
    unfreeze,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthSpec(n_parallel=4, n_task=4, seed=2))


@pytest.fixture(scope="module")
def config(corpus):
    return desk_config(len(corpus.student_vocab))


@pytest.fixture(scope="module")
def triple(corpus, config):
    return assemble_triple(corpus.task[0], corpus.student_vocab, config)


class TestInit:
    def test_same_seed_bit_identical(self, config):
        a = init_model(config, seed=5)
        b = init_model(config, seed=5)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_different_seed_differs(self, config):
        a = init_model(config, seed=5)
        b = init_model(config, seed=6)
        assert any(
            not torch.equal(p1, p2)
            for p1, p2 in zip(a.parameters(), b.parameters())
        )

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(hidden_size=16, num_layers=2, num_heads=3, vocab_size=10,
                        num_classes=2, feature_dim=4)

    def test_parameter_count_closed_form(self):
        h, layers, vocab, heads = 16, 2, 100, 2
        ffn, feat, classes, max_text = 4 * h, 10, 7, 128
        cfg = ModelConfig(hidden_size=h, num_layers=layers, num_heads=heads,
                          vocab_size=vocab, num_classes=classes, feature_dim=feat,
                          max_text_tokens=max_text)
        model = init_model(cfg, seed=0)
        embeddings = vocab * h + max_text * h + 2 * h + h + (feat * h + h) + 2 * h
        per_layer = (
            (3 * h * h + 3 * h)      # attention in-projections
            + (h * h + h)            # attention out-projection
            + 2 * h                  # attention layer norm
            + (h * ffn + ffn)        # ffn up
            + (ffn * h + h)          # ffn down
            + 2 * h                  # ffn layer norm
        )
        classifier = h * classes + classes
        expected = embeddings + layers * per_layer + classifier
        assert sum(p.numel() for p in model.parameters()) == expected


class TestForward:
    def test_eval_mode_deterministic(self, config, triple):
        model = init_model(config, seed=1)
        a = forward(model, triple, {config.num_layers})
        b = forward(model, triple, {config.num_layers})
        assert torch.equal(a.layer(config.num_layers), b.layer(config.num_layers))

    def test_dropout_changes_training_forward(self, corpus, triple):
        cfg = desk_config(len(corpus.student_vocab), dropout=0.5)
        model = init_model(cfg, seed=1)
        torch.manual_seed(0)
        a = forward(model, triple, {cfg.num_layers}, training=True)
        b = forward(model, triple, {cfg.num_layers}, training=True)
        assert not torch.equal(a.layer(cfg.num_layers), b.layer(cfg.num_layers))

    def test_padding_leaves_content_unchanged(self, config, triple):
        model = init_model(config, seed=1)
        plain = model.encode([triple], {1, config.num_layers})[0]
        padded = model.encode([triple], {1, config.num_layers},
                              pad_to=triple.seq_len + 9)[0]
        for layer in (1, config.num_layers):
            diff = (plain.layer(layer) - padded.layer(layer)).abs().max()
            assert float(diff.detach()) <= 1e-6

    def test_mixed_length_batch_matches_single(self, corpus, config):
        model = init_model(config, seed=1)
        triples = [
            assemble_triple(r, corpus.student_vocab, config) for r in corpus.task[:3]
        ]
        batch = model.encode(triples, {config.num_layers})
        for t, out in zip(triples, batch):
            solo = model.encode([t], {config.num_layers})[0]
            diff = (solo.layer(config.num_layers) - out.layer(config.num_layers)).abs().max()
            assert float(diff.detach()) <= 1e-6

    def test_retain_last_only(self, config, triple):
        model = init_model(config, seed=1)
        out = forward(model, triple, {config.num_layers})
        assert sorted(out.layers) == [config.num_layers]

    def test_retain_layer_out_of_range(self, config, triple):
        model = init_model(config, seed=1)
        with pytest.raises(ValueError):
            forward(model, triple, {config.num_layers + 1})

    def test_over_length_input_rejected(self, corpus, config):
        vocab = corpus.student_vocab
        ids = tuple([vocab.cls_id] + [vocab.unk_id] * config.max_text_tokens)
        from vlkd.model import ROLE_CLS, ROLE_QUESTION
        from vlkd.tokenizer import TokenizedText

        question = TokenizedText(
            tokens=("[UNK]",) * config.max_text_tokens,
            ids=(vocab.unk_id,) * config.max_text_tokens,
            word_spans=tuple((i, i, i) for i in range(config.max_text_tokens)),
            source_words=("x",) * config.max_text_tokens,
        )
        over = WordTagImageTriple(
            question=question,
            tags=(),
            regions=RegionFeatures(np.zeros((1, config.feature_dim), dtype=np.float32)),
            token_ids=ids,
            roles=(ROLE_CLS,) + (ROLE_QUESTION,) * config.max_text_tokens,
            segments=(0,) * len(ids),
            pad_id=vocab.pad_id,
        )
        model = init_model(config, seed=1)
        with pytest.raises(ValueError, match="exceeds budget"):
            model.encode([over], {1})

    def test_roles_partition_positions(self, config, triple):
        model = init_model(config, seed=1)
        out = forward(model, triple, {config.num_layers})
        assert len(out.roles) == triple.seq_len
        seen = sum(len(out.positions(r)) for r in ("cls", "question", "tag", "sep", "region"))
        assert seen == triple.seq_len


class TestZeroRegions:
    def test_imageless_record_encodes(self, corpus, config):
        import numpy as np
        from vlkd.data import ExampleRecord, assemble_triple as at
        from vlkd.distill import loss_img

        record = ExampleRecord(
            question_id="q", image_id="i",
            question=corpus.task[0].question, language="xx",
            answers=(("yes", 1),), tags=corpus.task[0].tags[:1],
            features=np.zeros((0, config.feature_dim), dtype=np.float32),
        )
        triple = at(record, corpus.student_vocab, config)
        model = init_model(config, seed=1)
        out = forward(model, triple, {config.num_layers})
        regions = out.vectors(config.num_layers, "region")
        assert regions.shape[0] == 0
        assert float(loss_img(regions, regions)) == 0.0


class TestClassify:
    def test_zero_classifier_gives_zero_logits(self, config, triple):
        model = init_model(config, seed=1)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
        out = forward(model, triple, {config.num_layers})
        assert torch.equal(classify(model, out), torch.zeros(config.num_classes))

    def test_single_class_scalar_shape(self, corpus, triple):
        cfg = desk_config(len(corpus.student_vocab), num_classes=1)
        model = init_model(cfg, seed=1)
        out = forward(model, triple, {cfg.num_layers})
        assert classify(model, out).shape == (1,)

    def test_matches_explicit_matrix_vector_product(self, corpus):
        cfg = desk_config(len(corpus.student_vocab), hidden_size=4, num_heads=2,
                          ffn_size=8, num_classes=3)
        model = init_model(cfg, seed=3)
        triple = assemble_triple(corpus.task[0], corpus.student_vocab, cfg)
        out = forward(model, triple, {cfg.num_layers})
        c = out.cls_vector(cfg.num_layers).detach().numpy()
        w = model.classifier.weight.detach().numpy()
        b = model.classifier.bias.detach().numpy()
        expected = w @ c + b
        np.testing.assert_allclose(
            classify(model, out).detach().numpy(), expected, rtol=1e-6, atol=1e-7
        )

    def test_missing_last_layer_rejected(self, config, triple):
        model = init_model(config, seed=1)
        out = forward(model, triple, {1})
        with pytest.raises(ValueError, match="not retained"):
            classify(model, out)


class TestGradients:
    def test_untouched_parameter_gets_zero_gradient(self, config, triple):
        model = init_model(config, seed=1)
        out = model.encode([triple], {1})[0]
        loss = out.layer(1).square().mean()
        grads = gradients(model, loss)
        # the classifier never feeds layer-1 states
        assert torch.equal(grads["classifier.weight"],
                           torch.zeros_like(model.classifier.weight))
        assert grads["word_embeddings.weight"].abs().sum() > 0

    def test_finite_difference_spot_check(self, corpus):
        cfg = desk_config(len(corpus.student_vocab), hidden_size=16, num_heads=2,
                          num_layers=2, ffn_size=16)
        model = init_model(cfg, seed=2, dtype=torch.float64)
        triple = assemble_triple(corpus.task[0], corpus.student_vocab, cfg)
        target = torch.randn(cfg.hidden_size, dtype=torch.float64,
                             generator=torch.Generator().manual_seed(0))

        def loss_value():
            out = model.encode([triple], {cfg.num_layers})[0]
            return loss_cls(out.cls_vector(cfg.num_layers), target)

        grads = gradients(model, loss_value())
        rng = np.random.default_rng(0)
        h = 1e-4
        with torch.no_grad():
            for name, param in model.named_parameters():
                flat = param.view(-1)
                for idx in rng.choice(flat.numel(), size=min(3, flat.numel()),
                                      replace=False):
                    old = flat[idx].item()
                    flat[idx] = old + h
                    up = float(loss_value())
                    flat[idx] = old - h
                    down = float(loss_value())
                    flat[idx] = old
                    fd = (up - down) / (2 * h)
                    ad = grads[name].view(-1)[idx].item()
                    assert abs(fd - ad) <= 1e-3 * max(abs(fd), abs(ad), 1e-8)

    def test_frozen_subset_excluded(self, config, triple):
        model = init_model(config, seed=1)
        freeze_all_but_classifier(model)
        out = model.encode([triple], {config.num_layers})[0]
        loss = classify(model, out).square().sum()
        grads = gradients(model, loss)
        assert set(grads) == {"classifier.weight", "classifier.bias"}
        assert grads["classifier.weight"].abs().sum() > 0
        unfreeze(model)

    def test_non_finite_loss_rejected(self, config):
        model = init_model(config, seed=1)
        with pytest.raises(FloatingPointError):
            gradients(model, torch.tensor(float("nan")))


class TestCheckpoint:
    def test_round_trip(self, config, triple, tmp_path):
        model = init_model(config, seed=4)
        path = tmp_path / "model.pt"
        save_checkpoint(model, path, step=17, metrics={"val": 0.5})
        loaded, step, metrics = load_checkpoint(path)
        assert step == 17 and metrics == {"val": 0.5}
        assert loaded.config == model.config
        for p1, p2 in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(p1, p2)
        a = forward(model, triple, {config.num_layers})
        b = forward(loaded, triple, {config.num_layers})
        assert torch.equal(a.layer(config.num_layers), b.layer(config.num_layers))
