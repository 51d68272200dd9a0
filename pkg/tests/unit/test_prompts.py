from __future__ import annotations

import numpy as np
import pytest

from unicontext import exceptions, prompts, synthdata
from unicontext.quantizers import annotations
from unicontext.quantizers.annotations import BBox
from unicontext.quantizers.codebook import Codebook
from unicontext.vocab import BOI, BOT, CAT_END, EOC, PAD, Segment

NAMES = ("red square", "blue bar")


@pytest.fixture
def seg_sample(small_vocab):
    def _(image_code, mask_code, size=4):
        return prompts.SegSample(
            image_tokens=[small_vocab.image_id(image_code)] * size,
            mask_tokens=[small_vocab.image_id(mask_code)] * size,
        )

    return _


@pytest.fixture
def cap_sample(small_vocab):
    def _(category=0, caption="a red square"):
        return prompts.CapSample(
            image_tokens=[small_vocab.image_id(1)] * 4,
            category=category,
            bbox=BBox(x1=0.1, y1=0.2, x2=0.5, y2=0.6),
            caption=caption,
        )

    return _


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("training", [True, False])
def test_assemble_segmentation__length(small_vocab, seg_sample, k, training):
    query = [small_vocab.image_id(2)] * 4
    sequence = prompts.assemble_segmentation(
        [seg_sample(0, 1)] * k,
        query,
        small_vocab,
        query_mask=[small_vocab.image_id(3)] * 4 if training else None,
    )

    assert len(sequence) == prompts.segmentation_length(k, 4, training=training)
    assert len(sequence.loss_mask) == len(sequence.ids)
    assert sequence.k == k
    expected_eoc = k + 1 if training else k
    assert sequence.ids.count(small_vocab.tag_id(EOC)) == expected_eoc


def test_assemble_segmentation__layout(small_vocab, seg_sample):
    boi, eoc = small_vocab.tag_id(BOI), small_vocab.tag_id(EOC)
    img = small_vocab.image_id

    sequence = prompts.assemble_segmentation(
        [seg_sample(0, 1, size=2)], [img(2)] * 2, small_vocab
    )

    assert sequence.ids == (boi, img(0), img(0), boi, img(1), img(1), eoc) + (
        boi,
        img(2),
        img(2),
        boi,
    )
    assert sequence.loss_mask == (False,) * 4 + (True, True) + (False,) * 5
    assert sequence.input_mask == (
        (False, True, True) + (False,) * 5 + (True, True, False)
    )
    assert sequence.pair_spans == ((0, 7), (7, 11))


@pytest.mark.parametrize(
    "k, t, expected_length, supervised",
    [(1, 64, 262, 128), (0, 64, 131, 64)],
)
def test_assemble_segmentation__training_examples(
    small_vocab, seg_sample, k, t, expected_length, supervised
):
    sequence = prompts.assemble_segmentation(
        [seg_sample(0, 1, size=t)] * k,
        [small_vocab.image_id(2)] * t,
        small_vocab,
        query_mask=[small_vocab.image_id(3)] * t,
    )

    assert len(sequence) == expected_length
    assert sum(sequence.loss_mask) == supervised


def test_assemble_segmentation__mismatched_sizes(small_vocab, seg_sample):
    with pytest.raises(exceptions.PromptError, match="Sample 0"):
        prompts.assemble_segmentation(
            [seg_sample(0, 1, size=64)], [small_vocab.image_id(2)] * 16, small_vocab
        )


def test_assemble_segmentation__not_image_tokens(small_vocab, seg_sample):
    with pytest.raises(exceptions.PromptError, match="Query image"):
        prompts.assemble_segmentation([], [small_vocab.tag_id(BOI)] * 4, small_vocab)


def test_assemble_segmentation__too_long(small_vocab, seg_sample):
    with pytest.raises(exceptions.SequenceTooLong) as excinfo:
        prompts.assemble_segmentation(
            [seg_sample(0, 1)] * 2,
            [small_vocab.image_id(2)] * 4,
            small_vocab,
            max_positions=20,
        )

    assert excinfo.value.limit == 20
    assert "max_positions=20" in str(excinfo.value)


def test_assemble_captioning__empty_context(small_vocab, tokenizer):
    sequence = prompts.assemble_captioning(
        [], [small_vocab.image_id(1)] * 4, 1, small_vocab, tokenizer, NAMES
    )

    category = annotations.encode_category(1, small_vocab, tokenizer, NAMES)
    assert sequence.ids == (
        small_vocab.tag_id(BOI),
        *[small_vocab.image_id(1)] * 4,
        small_vocab.tag_id(BOT),
        *category,
    )
    assert not any(sequence.loss_mask)


def test_assemble_captioning__supervised_span(small_vocab, tokenizer, cap_sample):
    sequence = prompts.assemble_captioning(
        [cap_sample()], [small_vocab.image_id(1)] * 4, 0, small_vocab, tokenizer, NAMES
    )

    _, end = sequence.pair_spans[0]
    bot = sequence.ids.index(small_vocab.tag_id(BOT))
    supervised = [i for i, bit in enumerate(sequence.loss_mask) if bit]
    assert supervised == list(range(bot + 1, end))
    assert sequence.ids[end - 1] == small_vocab.tag_id(EOC)
    for token, bit, image in zip(
        sequence.ids, sequence.loss_mask, sequence.input_mask
    ):
        if token == small_vocab.tag_id(BOI) or small_vocab.is_in(token, Segment.IMAGE):
            assert not bit
        assert not (bit and image)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("training", [True, False])
def test_assemble_captioning__length(small_vocab, tokenizer, cap_sample, k, training):
    query_caption = "a blue bar"
    sequence = prompts.assemble_captioning(
        [cap_sample()] * k,
        [small_vocab.image_id(1)] * 4,
        1,
        small_vocab,
        tokenizer,
        NAMES,
        query_target=(
            (BBox(x1=0, y1=0, x2=1, y2=1), query_caption) if training else None
        ),
    )

    category_lengths = [
        len(annotations.encode_category(c, small_vocab, tokenizer, NAMES))
        for c in [0] * k + [1]
    ]
    caption_lengths = [
        len(tokenizer.encode_local(c)) for c in ["a red square"] * k + [query_caption]
    ]
    assert len(sequence) == prompts.captioning_length(
        4, category_lengths, caption_lengths, training=training
    )


def test_assemble_captioning__pad_to_budget(small_vocab, tokenizer, cap_sample):
    sequence = prompts.assemble_captioning(
        [cap_sample()],
        [small_vocab.image_id(1)] * 4,
        0,
        small_vocab,
        tokenizer,
        NAMES,
        caption_budget=20,
        pad_to_budget=True,
    )

    _, end = sequence.pair_spans[0]
    pad = small_vocab.tag_id(PAD)
    eoc_at = sequence.ids.index(small_vocab.tag_id(EOC))
    caption_length = len(tokenizer.encode_local("a red square"))
    assert sequence.ids[eoc_at + 1 : end] == (pad,) * (20 - caption_length)
    assert not any(sequence.loss_mask[eoc_at + 1 : end])


def test_assemble_captioning__caption_over_budget(small_vocab, tokenizer, cap_sample):
    with pytest.raises(exceptions.PromptError, match="budget"):
        prompts.assemble_captioning(
            [cap_sample()],
            [small_vocab.image_id(1)] * 4,
            0,
            small_vocab,
            tokenizer,
            NAMES,
            caption_budget=2,
        )


def test_assemble_captioning__unknown_category(small_vocab, tokenizer):
    with pytest.raises(exceptions.UnknownCategory):
        prompts.assemble_captioning(
            [], [small_vocab.image_id(1)] * 4, 5, small_vocab, tokenizer, NAMES
        )


def test_parse_segmentation__round_trip(seg_task, data_config):
    items = seg_task.items[:100]
    for entry in items:
        sequence = seg_task.prompt(entry, [], training=True)
        expected = seg_task.scenes[entry.scene_id].objects[entry.object_index].mask

        mask = prompts.parse_segmentation(
            sequence.ids,
            seg_task.quantizers.vocab,
            seg_task.quantizers.codebook,
            data_config.image_size,
            data_config.image_size,
        )

        assert np.array_equal(mask, expected)


def test_parse_segmentation__incomplete(small_vocab):
    book = synthdata.palette_patches(1)
    cb = Codebook(entries=book, patch_size=1)
    output = [small_vocab.tag_id(BOI), *[small_vocab.image_id(0)] * 3]
    output.append(small_vocab.tag_id(EOC))

    with pytest.raises(exceptions.IncompleteOutput) as excinfo:
        prompts.parse_segmentation(output, small_vocab, cb, 2, 2)

    assert excinfo.value.count == 3
    assert excinfo.value.expected == 4


def test_parse_segmentation__skips_other_tokens(small_vocab):
    cb = Codebook(entries=synthdata.palette_patches(1), patch_size=1)
    white = synthdata.palette().index(synthdata.MASK_ON)
    black = synthdata.palette().index(synthdata.MASK_OFF)
    output = [
        small_vocab.tag_id(BOI),
        small_vocab.image_id(white),
        small_vocab.bin_id(3),
        small_vocab.image_id(black),
        small_vocab.image_id(black),
        small_vocab.image_id(white),
    ]

    mask = prompts.parse_segmentation(output, small_vocab, cb, 2, 2)

    assert mask.tolist() == [[True, False], [False, True]]


def test_parse_captioning__round_trip(cap_task):
    items = cap_task.items[:100]
    for entry in items:
        sequence = cap_task.prompt(entry, [], training=True)
        target = cap_task.scenes[entry.scene_id].objects[entry.object_index]

        record = prompts.parse_captioning(
            sequence.ids,
            cap_task.quantizers.vocab,
            cap_task.quantizers.tokenizer,
            cap_task.quantizers.class_names,
        )

        assert record.category == target.class_index
        assert record.caption == target.caption
        assert not record.truncated
        for a, b in zip(record.bbox.as_tuple(), target.bbox.as_tuple()):
            assert abs(a - b) <= 5e-4 + 1e-12


def _query_prefix(small_vocab, tokenizer, category=0):
    return [
        small_vocab.tag_id(BOT),
        *annotations.encode_category(category, small_vocab, tokenizer, NAMES),
    ]


def test_parse_captioning__truncated(small_vocab, tokenizer):
    box = BBox(x1=0.1, y1=0.1, x2=0.2, y2=0.2)
    output = [
        *_query_prefix(small_vocab, tokenizer),
        *annotations.quantize_bbox(box, small_vocab),
        *tokenizer.encode_local("a red"),
    ]

    record = prompts.parse_captioning(output, small_vocab, tokenizer, NAMES)

    assert record.caption == "a red"
    assert record.truncated


def test_parse_captioning__missing_box(small_vocab, tokenizer):
    output = [*_query_prefix(small_vocab, tokenizer), small_vocab.tag_id(EOC)]

    with pytest.raises(exceptions.ParseError, match="box start"):
        prompts.parse_captioning(output, small_vocab, tokenizer, NAMES)


def test_parse_captioning__bins_out_of_order(small_vocab, tokenizer):
    output = [
        *_query_prefix(small_vocab, tokenizer),
        small_vocab.tag_id("<b_st>"),
        small_vocab.bin_id(500),
        small_vocab.bin_id(0),
        small_vocab.bin_id(100),
        small_vocab.bin_id(10),
        small_vocab.tag_id("<b_ed>"),
        small_vocab.tag_id(EOC),
    ]

    with pytest.raises(exceptions.BoxError):
        prompts.parse_captioning(output, small_vocab, tokenizer, NAMES)


def test_parse_captioning__unknown_category(small_vocab, tokenizer):
    output = [
        small_vocab.tag_id(BOT),
        small_vocab.tag_id("<c_st>"),
        *tokenizer.encode_local("red squar"),
        small_vocab.tag_id(CAT_END),
    ]

    with pytest.raises(exceptions.UnknownCategory) as excinfo:
        prompts.parse_captioning(output, small_vocab, tokenizer, NAMES)

    assert excinfo.value.candidates == ["red square"]


def test_parse_captioning__unexpected_token(small_vocab, tokenizer):
    box = BBox(x1=0.1, y1=0.1, x2=0.2, y2=0.2)
    output = [
        *_query_prefix(small_vocab, tokenizer),
        *annotations.quantize_bbox(box, small_vocab),
        small_vocab.image_id(0),
    ]

    with pytest.raises(exceptions.ParseError) as excinfo:
        prompts.parse_captioning(output, small_vocab, tokenizer, NAMES)

    assert excinfo.value.position == len(output) - 1


def test_collate(small_vocab, seg_sample):
    query = [small_vocab.image_id(2)] * 4
    short = prompts.assemble_segmentation([], query, small_vocab)
    long = prompts.assemble_segmentation([seg_sample(0, 1)], query, small_vocab)
    pad = small_vocab.tag_id(PAD)

    batch = prompts.collate("segmentation", [short, long], pad)

    assert batch.ids.shape == (2, len(long))
    assert (batch.ids[0, len(short) :] == pad).all()
    assert not batch.loss_mask[0, len(short) :].any()
    assert batch.loss_mask[1].tolist() == list(long.loss_mask)
    assert batch.size == 2


def test_collate__empty():
    with pytest.raises(exceptions.PromptError):
        prompts.collate("segmentation", [], 0)


def test_shift():
    ids = np.arange(5)[None]
    mask = np.array([[False, True, True, False, True]])

    inputs, targets, loss_mask, input_mask = prompts.shift(ids, mask, ~mask)

    assert inputs.tolist() == [[0, 1, 2, 3]]
    assert targets.tolist() == [[1, 2, 3, 4]]
    assert loss_mask.tolist() == [[True, True, False, True]]
    assert input_mask.tolist() == [[False, False, True, False]]


def test_render_sequence(small_vocab, tokenizer, seg_sample):
    sequence = prompts.assemble_segmentation(
        [seg_sample(0, 1, size=1)], [small_vocab.image_id(2)], small_vocab
    )

    lines = prompts.render_sequence(sequence, small_vocab, tokenizer).splitlines()

    assert len(lines) == len(sequence)
    assert lines[0].split("\t") == ["0", "special", "0", "[BOI]", "0"]
    assert lines[3].split("\t") == ["3", "image", "1", "<img_1>", "1"]
