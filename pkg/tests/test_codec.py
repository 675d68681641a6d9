"""Codec tests: quantization arithmetic, templating, tokenizer round trips."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinlab.codec import (BBox, BoxParseError, CodecError, GridSpec, Vocabulary,
                          box_to_text, build_prompt, downscale_box,
                          quantize_box, scale_box, text_to_box, try_parse_box)

GRID_224 = GridSpec(224, 16)
GRID_64 = GridSpec(64, 16)


class TestGridSpec:
    def test_cell(self):
        assert GRID_224.cell == 14
        assert GRID_64.cell == 4

    def test_exact_division_required(self):
        with pytest.raises(CodecError):
            GridSpec(100, 16)

    def test_values_cover_range(self):
        vals = GRID_64.values()
        assert vals[0] == 0 and vals[-1] == 64 and len(vals) == 17


class TestQuantize:
    def test_paper_scale_example(self):
        q = quantize_box(BBox(100, 30, 150, 200), GRID_224)
        assert q.as_tuple() == (98, 28, 154, 196)
        assert q.quantized

    def test_aligned_box_is_fixed_point(self):
        b = BBox(14, 28, 140, 196, quantized=True)
        assert quantize_box(b, GRID_224).as_tuple() == b.as_tuple()

    def test_degenerate_expansion(self):
        q = quantize_box(BBox(0, 0, 3, 3), GRID_224)
        assert q.as_tuple() == (0, 0, 14, 14)

    def test_degenerate_at_far_edge_stays_in_bounds(self):
        side = GRID_224.image_side
        q = quantize_box(BBox(side - 2, side - 2, side - 1, side - 1), GRID_224)
        assert q.as_tuple() == (side - 14, side - 14, side, side)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            x0, y0 = rng.integers(0, 60, 2)
            b = BBox(int(x0), int(y0), int(x0) + int(rng.integers(1, 64 - x0 + 1)),
                     int(y0) + int(rng.integers(1, 64 - y0 + 1)))
            q1 = quantize_box(b, GRID_64)
            assert quantize_box(q1, GRID_64).as_tuple() == q1.as_tuple()

    @given(st.integers(0, 223), st.integers(0, 223),
           st.integers(1, 224), st.integers(1, 224))
    @settings(max_examples=200, deadline=None)
    def test_error_bounded_by_half_cell(self, x0, y0, w, h):
        if x0 + w > 224 or y0 + h > 224:
            return
        b = BBox(x0, y0, x0 + w, y0 + h)
        q = quantize_box(b, GRID_224)
        half = GRID_224.cell / 2
        pairs = zip(b.as_tuple(), q.as_tuple())
        # degeneracy expansion may move the max edge further than half a cell
        if b.width > GRID_224.cell and b.height > GRID_224.cell:
            assert all(abs(a - c) <= half for a, c in pairs)


class TestBoxText:
    def test_template(self):
        assert box_to_text(BBox(14, 28, 140, 196, quantized=True)) == \
            "[14, 28, 140, 196]"

    def test_single_cell(self):
        assert box_to_text(BBox(0, 0, 14, 14, quantized=True)) == "[0, 0, 14, 14]"

    def test_unquantized_rejected(self):
        with pytest.raises(CodecError):
            box_to_text(BBox(1, 2, 3, 4))

    def test_parse_inverse(self):
        assert text_to_box("[14, 28, 140, 196]", GRID_224).as_tuple() == \
            (14, 28, 140, 196)

    def test_parse_tolerates_whitespace(self):
        assert text_to_box("  [ 14 ,28,  140 , 196 ]  ", GRID_224).as_tuple() == \
            (14, 28, 140, 196)

    def test_parse_failures(self):
        with pytest.raises(BoxParseError):
            text_to_box("a cat in the image", GRID_224)
        with pytest.raises(BoxParseError):
            text_to_box("[196, 28, 14, 196]", GRID_224)  # ordering
        with pytest.raises(BoxParseError):
            text_to_box("[0, 0, 500, 10]", GRID_224)  # out of range
        assert try_parse_box("nonsense", GRID_224) is None

    def test_exhaustive_round_trip_small_grid(self):
        grid = GridSpec(64, 8)
        vals = grid.values()
        for x0, x1 in itertools.combinations(vals, 2):
            for y0, y1 in itertools.combinations(vals, 2):
                b = BBox(x0, y0, x1, y1, quantized=True)
                assert text_to_box(box_to_text(b), grid).as_tuple() == b.as_tuple()


class TestPrompt:
    def test_plain(self):
        assert build_prompt("circle") == "in the image is a circle located at"

    def test_referral_prefix(self):
        assert build_prompt("circle", ("left", "prefix")) == \
            "in the image is a left circle located at"

    def test_referral_suffix(self):
        assert build_prompt("circle", ("left", "suffix")) == \
            "in the image is a circle on left located at"

    def test_unknown_referral_word(self):
        with pytest.raises(CodecError):
            build_prompt("circle", ("middle", "prefix"))


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(["red-circle", "blue-star"], GRID_64)


class TestVocabulary:
    def test_exact_size(self, vocab):
        # specials + punctuation + prompt words + categories + coordinates
        assert len(vocab) == 3 + 3 + 15 + 2 + 17

    def test_bijection(self, vocab):
        assert len(set(vocab.index.values())) == len(vocab.tokens)
        for tok, idx in vocab.index.items():
            assert vocab.tokens[idx] == tok

    def test_coordinate_is_single_token(self):
        v224 = Vocabulary(["cat"], GRID_224)
        assert "98" in v224.index

    def test_tokenize_empty(self, vocab):
        assert vocab.tokenize("") == []

    def test_round_trip_prompt_and_answer(self, vocab):
        for text in ("in the image is a red-circle located at",
                     "[4, 20, 40, 64]",
                     "in the image is a blue-star on left located at",
                     "a photo of a red-circle and a blue-star"):
            assert vocab.detokenize(vocab.tokenize(text)) == text

    def test_oov_rejected(self, vocab):
        with pytest.raises(CodecError):
            vocab.tokenize("in the image is a dragon located at")

    def test_save_load_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path, GRID_64)
        assert loaded.tokens == vocab.tokens

    def test_category_collision_rejected(self):
        with pytest.raises(CodecError):
            Vocabulary(["left"], GRID_64)


class TestScaleBox:
    def test_scale_round_trip(self):
        b = BBox(4, 8, 20, 32, quantized=True)
        assert downscale_box(scale_box(b, 2), 2).as_tuple() == b.as_tuple()

    def test_downscale_requires_divisibility(self):
        with pytest.raises(CodecError):
            downscale_box(BBox(1, 0, 5, 4), 2)
