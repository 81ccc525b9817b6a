import json
import random

import pytest

from vlkd.codemix import (
    AlignmentFormatError,
    WordAlignment,
    code_mix,
    eligible_words,
    load_alignments,
    parse_alignment,
)
from vlkd.tokenizer import SPECIAL_TOKENS, SubwordVocab, tokenize


def make_vocab(*entries):
    return SubwordVocab.from_entries(list(SPECIAL_TOKENS) + list(entries))


# "taxi" tokenizes identically in both vocabs; "snowboard" does not.
STUDENT = make_vocab("taxi", "snow", "##bo", "##ard", "voiture", "velik", "dom")
TEACHER = make_vocab("taxi", "snow", "##board")


class TestAlignmentParsing:
    def test_direct_parse(self):
        assert parse_alignment("0-0 1-2").pairs == frozenset({(0, 0), (1, 2)})

    def test_empty_line(self):
        assert parse_alignment("").pairs == frozenset()

    def test_duplicates_collapse(self):
        assert parse_alignment("0-0 0-0").pairs == frozenset({(0, 0)})

    def test_malformed_token_reports_line(self, tmp_path):
        path = tmp_path / "align.txt"
        path.write_text("0-0\n0-0 1:2\n")
        with pytest.raises(AlignmentFormatError, match="line 2"):
            load_alignments(path)

    def test_file_order_matches_corpus(self, tmp_path):
        path = tmp_path / "align.txt"
        path.write_text("0-0\n\n1-0 0-1\n")
        aligns = load_alignments(path)
        assert len(aligns) == 3
        assert aligns[1].pairs == frozenset()
        assert aligns[2].pairs == {(1, 0), (0, 1)}

    def test_bounds_validation(self):
        with pytest.raises(ValueError, match="out of bounds"):
            WordAlignment(frozenset({(0, 5)})).validate_bounds(1, 2)


class TestEligibility:
    def test_identical_single_subword_eligible(self):
        align = parse_alignment("0-0")
        assert eligible_words(["taxi"], ["voiture"], align, STUDENT, TEACHER) == [0]

    def test_divergent_segmentation_ineligible(self):
        align = parse_alignment("0-0")
        assert eligible_words(["snowboard"], ["velik"], align, STUDENT, TEACHER) == []

    def test_unaligned_word_ineligible(self):
        align = parse_alignment("")
        assert eligible_words(["taxi"], ["voiture"], align, STUDENT, TEACHER) == []

    def test_multi_aligned_word_ineligible(self):
        align = parse_alignment("0-0 1-0")
        out = eligible_words(["taxi", "taxi"], ["voiture"], align, STUDENT, TEACHER)
        assert out == []


class TestCodeMix:
    def test_ratio_zero_is_identity(self):
        align = parse_alignment("0-0 1-1")
        mixed = code_mix(["taxi", "taxi"], ["voiture", "dom"], align,
                         STUDENT, TEACHER, ratio=0.0, seed=1)
        assert mixed.words == ("voiture", "dom")
        assert mixed.replaced == ()

    def test_exact_count_20_words(self):
        source = [f"w{i}" for i in range(20)]
        target = [f"t{i}" for i in range(20)]
        vocab = make_vocab(*source, *target)
        align = WordAlignment(frozenset((i, i) for i in range(20)))
        mixed = code_mix(source, target, align, vocab, vocab, ratio=0.15, seed=3)
        assert len(mixed.replaced) == round(0.15 * 20) == 3

    def test_cap_at_eligible_count(self):
        # 20 target words but only one aligned word tokenizes identically:
        # the teacher knows every source word whole, the student only "taxi".
        source = ["taxi"] + [f"w{i}" for i in range(19)]
        target = [f"t{i}" for i in range(20)]
        student = make_vocab("taxi", *target)
        teacher = make_vocab(*source)
        align = WordAlignment(frozenset((i, i) for i in range(20)))
        mixed = code_mix(source, target, align, student, teacher, ratio=0.15, seed=3)
        assert len(mixed.replaced) == 1
        assert mixed.words[0] == "taxi"

    def test_seed_reproducibility(self):
        source = [f"w{i}" for i in range(12)]
        target = [f"t{i}" for i in range(12)]
        vocab = make_vocab(*source, *target)
        align = WordAlignment(frozenset((i, i) for i in range(12)))
        a = code_mix(source, target, align, vocab, vocab, ratio=0.5, seed=42)
        b = code_mix(source, target, align, vocab, vocab, ratio=0.5, seed=42)
        assert a == b
        c = code_mix(source, target, align, vocab, vocab, ratio=0.5, seed=43)
        assert json.dumps(a.words) == json.dumps(b.words)
        assert a.words != c.words or a.replaced != c.replaced

    def test_replaced_words_tokenize_identically(self):
        source = [f"w{i}" for i in range(10)]
        target = [f"t{i}" for i in range(10)]
        vocab = make_vocab(*source, *target)
        align = WordAlignment(frozenset((i, i) for i in range(10)))
        mixed = code_mix(source, target, align, vocab, vocab, ratio=0.4, seed=5)
        assert mixed.replaced
        for t, s in mixed.replaced:
            word = mixed.words[t]
            assert word == source[s]
            assert tokenize(word, vocab).tokens == tokenize(word, vocab).tokens

    def test_non_replaced_words_untouched(self):
        source = [f"w{i}" for i in range(10)]
        target = [f"t{i}" for i in range(10)]
        vocab = make_vocab(*source, *target)
        align = WordAlignment(frozenset((i, i) for i in range(10)))
        mixed = code_mix(source, target, align, vocab, vocab, ratio=0.3, seed=9)
        replaced_idx = {t for t, _ in mixed.replaced}
        for i, word in enumerate(mixed.words):
            if i not in replaced_idx:
                assert word == target[i]

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            code_mix([], [], WordAlignment(frozenset()), STUDENT, TEACHER,
                     ratio=1.5, seed=0)

    def test_bernoulli_and_eligible_basis_switches(self):
        source = [f"w{i}" for i in range(30)]
        target = [f"t{i}" for i in range(30)]
        vocab = make_vocab(*source, *target)
        align = WordAlignment(frozenset((i, i) for i in range(30)))
        exact = code_mix(source, target, align, vocab, vocab, 0.2, 1,
                         count_basis="eligible")
        assert len(exact.replaced) == round(0.2 * 30)
        rng = random.Random(0)
        counts = [
            len(code_mix(source, target, align, vocab, vocab, 0.2,
                         rng.randrange(10_000), sampling="bernoulli").replaced)
            for _ in range(40)
        ]
        mean = sum(counts) / len(counts)
        assert 3.0 < mean < 9.0  # loose band around 0.2 * 30 = 6

    def test_replaced_fraction_tracks_ratio(self):
        # Fully eligible corpus: every sentence hits round(ratio * n) exactly.
        rng = random.Random(17)
        vocab_words = [f"w{i}" for i in range(40)] + [f"t{i}" for i in range(40)]
        vocab = make_vocab(*vocab_words)
        for _ in range(30):
            n = rng.randint(1, 40)
            source = [f"w{rng.randrange(40)}" for _ in range(n)]
            target = [f"t{i}" for i in range(n)]
            align = WordAlignment(frozenset((i, i) for i in range(n)))
            mixed = code_mix(source, target, align, vocab, vocab, 0.15,
                             rng.randrange(10_000))
            assert len(mixed.replaced) == round(0.15 * n)
