"""
In-context prompt grammar.

Segmentation, one pair per in-context sample::

    [BOI] image_tokens [BOI] mask_tokens [EOC]

Captioning, one pair per in-context sample::

    [BOI] image_tokens [BOT] <c_st> name <c_ed> <b_st> x1 y1 x2 y2 <b_ed> caption [EOC]

The query comes last. At inference it stops where the model has to take over
(after the second [BOI] for segmentation, after the category span for
captioning). During training the query target is appended and supervised like
the in-context targets.

Position ``t`` of ``loss_mask`` tells whether token ``t`` is a training target.
The model predicts token ``t`` from positions ``0..t-1``, see `shift`.
"""

from __future__ import annotations

import difflib
import logging
from typing import Iterable, Sequence

import attr
import numpy as np

from unicontext import exceptions
from unicontext.quantizers import annotations, bpe, codebook
from unicontext.quantizers.annotations import BBox
from unicontext.vocab import (
    BOI,
    BOT,
    CAT_END,
    CAT_START,
    EOC,
    PAD,
    Segment,
    Vocabulary,
)

logger = logging.getLogger(__name__)

DEFAULT_CAPTION_BUDGET = 32


@attr.dataclass(frozen=True, kw_only=True)
class SegSample:
    image_tokens: tuple[int, ...] = attr.ib(converter=tuple)
    mask_tokens: tuple[int, ...] = attr.ib(converter=tuple)


@attr.dataclass(frozen=True, kw_only=True)
class CapSample:
    image_tokens: tuple[int, ...] = attr.ib(converter=tuple)
    category: int
    bbox: BBox
    caption: str


@attr.dataclass(frozen=True, kw_only=True)
class CaptionRecord:
    category: int
    bbox: BBox
    caption: str
    truncated: bool = False


@attr.dataclass(frozen=True, kw_only=True)
class PromptSequence:
    """
    Attributes
    ----------
    ids :
        Token ids of the whole prompt.
    loss_mask :
        True on supervised target tokens.
    input_mask :
        True on the input image tokens of every pair.
    pair_spans :
        ``(start, end)`` of every pair, query included, ``end`` excluded.
    """

    ids: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    input_mask: tuple[bool, ...]
    pair_spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        """
        Number of in-context samples before the query.
        """
        return len(self.pair_spans) - 1


class _Builder:
    def __init__(self):
        self.ids: list[int] = []
        self.loss_mask: list[bool] = []
        self.input_mask: list[bool] = []
        self.pair_spans: list[tuple[int, int]] = []
        self._pair_start = 0

    def add(
        self, tokens: Iterable[int], *, target: bool = False, image_input: bool = False
    ) -> None:
        tokens = list(tokens)
        self.ids.extend(tokens)
        self.loss_mask.extend([target] * len(tokens))
        self.input_mask.extend([image_input] * len(tokens))

    def start_pair(self) -> None:
        self._pair_start = len(self.ids)

    def end_pair(self) -> None:
        self.pair_spans.append((self._pair_start, len(self.ids)))

    def build(self, max_positions: int | None) -> PromptSequence:
        if max_positions is not None and len(self.ids) > max_positions:
            raise exceptions.SequenceTooLong(length=len(self.ids), limit=max_positions)
        return PromptSequence(
            ids=tuple(self.ids),
            loss_mask=tuple(self.loss_mask),
            input_mask=tuple(self.input_mask),
            pair_spans=tuple(self.pair_spans),
        )


def _check_image_tokens(tokens: Sequence[int], vocab: Vocabulary, what: str) -> None:
    for token in tokens:
        if not vocab.is_in(token, Segment.IMAGE):
            raise exceptions.PromptError(
                f"{what} contains {vocab.describe(token)}, expected image tokens only"
            )


def segmentation_length(k: int, tokens_per_image: int, *, training: bool) -> int:
    pair = 2 * tokens_per_image + 3
    if training:
        return (k + 1) * pair
    return k * pair + tokens_per_image + 2


def assemble_segmentation(
    samples: Sequence[SegSample],
    query: Sequence[int],
    vocab: Vocabulary,
    *,
    query_mask: Sequence[int] | None = None,
    max_positions: int | None = None,
) -> PromptSequence:
    """
    Build a segmentation prompt. When ``query_mask`` is given the query target
    and its [EOC] are appended (training layout). Every mask is supervised.
    """
    size = len(query)
    _check_image_tokens(query, vocab, "Query image")
    for index, sample in enumerate(samples):
        if len(sample.image_tokens) != size or len(sample.mask_tokens) != size:
            raise exceptions.PromptError(
                f"Sample {index} has {len(sample.image_tokens)} image and "
                f"{len(sample.mask_tokens)} mask tokens, query has {size}"
            )
        _check_image_tokens(sample.image_tokens, vocab, f"Sample {index} image")
        _check_image_tokens(sample.mask_tokens, vocab, f"Sample {index} mask")
    if query_mask is not None:
        if len(query_mask) != size:
            raise exceptions.PromptError(
                f"Query mask has {len(query_mask)} tokens, query has {size}"
            )
        _check_image_tokens(query_mask, vocab, "Query mask")

    boi, eoc = vocab.tag_id(BOI), vocab.tag_id(EOC)
    builder = _Builder()
    for sample in samples:
        builder.start_pair()
        builder.add([boi])
        builder.add(sample.image_tokens, image_input=True)
        builder.add([boi])
        builder.add(sample.mask_tokens, target=True)
        builder.add([eoc])
        builder.end_pair()

    builder.start_pair()
    builder.add([boi])
    builder.add(query, image_input=True)
    builder.add([boi])
    if query_mask is not None:
        builder.add(query_mask, target=True)
        builder.add([eoc])
    builder.end_pair()
    return builder.build(max_positions)


def caption_tokens(
    caption: str, vocab: Vocabulary, tokenizer: bpe.BpeTokenizer, budget: int
) -> list[int]:
    tokens = bpe.encode_text(tokenizer, caption, vocab)
    if not tokens:
        raise exceptions.PromptError("Captions cannot be empty")
    if len(tokens) > budget:
        raise exceptions.PromptError(
            f"Caption {caption!r} takes {len(tokens)} tokens, budget is {budget}"
        )
    return tokens


def captioning_length(
    tokens_per_image: int,
    category_lengths: Sequence[int],
    caption_lengths: Sequence[int],
    *,
    training: bool,
) -> int:
    """
    Closed-form prompt length. The last entry of each list describes the query,
    its caption length is ignored at inference.
    """
    total = 0
    for index, (category, caption) in enumerate(
        zip(category_lengths, caption_lengths)
    ):
        total += 2 + tokens_per_image + category
        if training or index < len(category_lengths) - 1:
            total += annotations.BOX_TOKEN_COUNT + caption + 1
    return total


def assemble_captioning(
    samples: Sequence[CapSample],
    query_image: Sequence[int],
    query_category: int,
    vocab: Vocabulary,
    tokenizer: bpe.BpeTokenizer,
    names: Sequence[str],
    *,
    query_target: tuple[BBox, str] | None = None,
    caption_budget: int = DEFAULT_CAPTION_BUDGET,
    pad_to_budget: bool = False,
    max_positions: int | None = None,
) -> PromptSequence:
    """
    Build a captioning prompt. When ``query_target`` (box and caption) is
    given, the query record and its [EOC] are appended and supervised
    (training layout). With ``pad_to_budget``, [PAD] tokens follow every [EOC]
    so each caption occupies exactly ``caption_budget`` slots.
    """
    _check_image_tokens(query_image, vocab, "Query image")
    boi, bot, eoc = vocab.tag_id(BOI), vocab.tag_id(BOT), vocab.tag_id(EOC)
    pad = vocab.tag_id(PAD)
    builder = _Builder()

    def add_record(box: BBox, caption: str) -> None:
        tokens = caption_tokens(caption, vocab, tokenizer, caption_budget)
        builder.add(annotations.quantize_bbox(box, vocab), target=True)
        builder.add(tokens, target=True)
        builder.add([eoc], target=True)
        if pad_to_budget:
            builder.add([pad] * (caption_budget - len(tokens)))

    for index, sample in enumerate(samples):
        if len(sample.image_tokens) != len(query_image):
            raise exceptions.PromptError(
                f"Sample {index} has {len(sample.image_tokens)} image tokens, "
                f"query has {len(query_image)}"
            )
        _check_image_tokens(sample.image_tokens, vocab, f"Sample {index} image")
        builder.start_pair()
        builder.add([boi])
        builder.add(sample.image_tokens, image_input=True)
        builder.add([bot])
        builder.add(
            annotations.encode_category(sample.category, vocab, tokenizer, names),
            target=True,
        )
        add_record(sample.bbox, sample.caption)
        builder.end_pair()

    builder.start_pair()
    builder.add([boi])
    builder.add(query_image, image_input=True)
    builder.add([bot])
    builder.add(annotations.encode_category(query_category, vocab, tokenizer, names))
    if query_target is not None:
        add_record(*query_target)
    builder.end_pair()
    return builder.build(max_positions)


# Parsing


def _last_index(ids: Sequence[int], token: int) -> int:
    for index in range(len(ids) - 1, -1, -1):
        if ids[index] == token:
            return index
    return -1


def parse_segmentation(
    output: Sequence[int],
    vocab: Vocabulary,
    cb: codebook.Codebook,
    height: int,
    width: int,
) -> np.ndarray:
    """
    Read the mask following the last [BOI] of ``output`` and binarize it on
    the channel mean at mid-gray. Non-image tokens are skipped.
    """
    expected = (height // cb.patch_size) * (width // cb.patch_size)
    eoc = vocab.tag_id(EOC)
    tokens: list[int] = []
    for token in output[_last_index(output, vocab.tag_id(BOI)) + 1 :]:
        if len(tokens) == expected or token == eoc:
            break
        if vocab.is_in(token, Segment.IMAGE):
            tokens.append(token)
    if len(tokens) < expected:
        raise exceptions.IncompleteOutput(count=len(tokens), expected=expected)
    image = codebook.dequantize_image(tokens, cb, vocab, height, width)
    return image.mean(axis=-1) > 0.5


def _decode_category(
    ids: Sequence[int],
    start: int,
    vocab: Vocabulary,
    tokenizer: bpe.BpeTokenizer,
    names: Sequence[str],
) -> tuple[int, int]:
    """
    Returns the class index and the position right after <c_ed>.
    """
    if start >= len(ids) or ids[start] != vocab.tag_id(CAT_START):
        raise exceptions.ParseError("Expected a category start tag", position=start)
    end = start + 1
    cat_end = vocab.tag_id(CAT_END)
    while end < len(ids) and ids[end] != cat_end:
        end += 1
    if end == len(ids):
        raise exceptions.ParseError("Category span is not closed", position=end)
    try:
        name = bpe.decode_text(tokenizer, ids[start + 1 : end], vocab)
    except exceptions.TokenOutOfRange as exc:
        raise exceptions.ParseError(
            "Category span contains non-text tokens", position=start + 1
        ) from exc
    name = " ".join(name.split())
    if name not in names:
        candidates = difflib.get_close_matches(name, names, n=3)
        raise exceptions.UnknownCategory(name, candidates=candidates)
    return list(names).index(name), end + 1


def parse_captioning(
    output: Sequence[int],
    vocab: Vocabulary,
    tokenizer: bpe.BpeTokenizer,
    names: Sequence[str],
) -> CaptionRecord:
    """
    Read the ``category box caption [EOC]`` record following the last [BOT] of
    ``output``. A record without [EOC] keeps the caption read so far and is
    flagged as truncated.
    """
    position = _last_index(output, vocab.tag_id(BOT)) + 1
    category, position = _decode_category(output, position, vocab, tokenizer, names)
    frame = output[position : position + annotations.BOX_TOKEN_COUNT]
    box = annotations.dequantize_bbox(frame, vocab, start=position)
    position += annotations.BOX_TOKEN_COUNT

    eoc = vocab.tag_id(EOC)
    text_ids = []
    truncated = True
    for offset, token in enumerate(output[position:]):
        if token == eoc:
            truncated = False
            break
        if not vocab.is_in(token, Segment.TEXT):
            raise exceptions.ParseError(
                f"Unexpected {vocab.describe(token)} in caption",
                position=position + offset,
            )
        text_ids.append(token)
    caption = " ".join(bpe.decode_text(tokenizer, text_ids, vocab).split())
    return CaptionRecord(
        category=category, bbox=box, caption=caption, truncated=truncated
    )


# Batching


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class Batch:
    """
    Right-padded single-task batch. Arrays are (batch, length).
    """

    task: str
    ids: np.ndarray
    loss_mask: np.ndarray
    input_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def supervised_tokens(self) -> int:
        return int(self.loss_mask[:, 1:].sum())


def collate(task: str, sequences: Sequence[PromptSequence], pad_id: int) -> Batch:
    if not sequences:
        raise exceptions.PromptError("Cannot collate an empty list of sequences")
    length = max(len(sequence) for sequence in sequences)
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    loss_mask = np.zeros((len(sequences), length), dtype=bool)
    input_mask = np.zeros((len(sequences), length), dtype=bool)
    for row, sequence in enumerate(sequences):
        ids[row, : len(sequence)] = sequence.ids
        loss_mask[row, : len(sequence)] = sequence.loss_mask
        input_mask[row, : len(sequence)] = sequence.input_mask
    return Batch(task=task, ids=ids, loss_mask=loss_mask, input_mask=input_mask)


def shift(
    ids: np.ndarray, loss_mask: np.ndarray, input_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Next-token alignment along the last axis: logits computed on ``inputs[t]``
    are scored against ``targets[t]``.
    """
    return ids[..., :-1], ids[..., 1:], loss_mask[..., 1:], input_mask[..., 1:]


# Rendering


def render_token(token: int, vocab: Vocabulary, tokenizer: bpe.BpeTokenizer) -> str:
    segment, local = vocab.resolve(token)
    if segment is Segment.TEXT and local < tokenizer.size:
        return repr(tokenizer.strings[local])
    return vocab.describe(token)


def render_sequence(
    sequence: PromptSequence, vocab: Vocabulary, tokenizer: bpe.BpeTokenizer
) -> str:
    """
    One line per token: position, segment, local index, rendering, loss bit.
    """
    lines = []
    for position, (token, supervised) in enumerate(
        zip(sequence.ids, sequence.loss_mask)
    ):
        segment, local = vocab.resolve(token)
        lines.append(
            f"{position}\t{segment.value}\t{local}\t"
            f"{render_token(token, vocab, tokenizer)}\t{int(supervised)}"
        )
    return "\n".join(lines) + "\n"
