from __future__ import annotations

import math
from typing import Sequence

import attr

from unicontext import exceptions
from unicontext.quantizers import bpe
from unicontext.vocab import (
    BOX_END,
    BOX_START,
    CAT_END,
    CAT_START,
    Segment,
    Vocabulary,
)

BOX_TOKEN_COUNT = 6


def _check_coordinate(instance, attribute, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise exceptions.BoxError(f"{attribute.name}={value} is outside [0, 1]")


@attr.dataclass(frozen=True, kw_only=True)
class BBox:
    """
    Box in normalized image coordinates, (x1, y1) top-left and (x2, y2)
    bottom-right.
    """

    x1: float = attr.ib(converter=float, validator=_check_coordinate)
    y1: float = attr.ib(converter=float, validator=_check_coordinate)
    x2: float = attr.ib(converter=float, validator=_check_coordinate)
    y2: float = attr.ib(converter=float, validator=_check_coordinate)

    def __attrs_post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise exceptions.BoxError(
                f"Box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) has a negative "
                "extent"
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def iou(self, other: BBox) -> float:
        width = min(self.x2, other.x2) - max(self.x1, other.x1)
        height = min(self.y2, other.y2) - max(self.y1, other.y1)
        intersection = max(width, 0.0) * max(height, 0.0)
        union = self.area + other.area - intersection
        if union <= 0.0:
            # Two degenerate boxes: identical ones match fully.
            return 1.0 if self == other else 0.0
        return intersection / union


def coordinate_to_bin(value: float, bin_count: int) -> int:
    """
    Nearest bin of a [0, 1] coordinate, ties rounding down.
    """
    scaled = value * (bin_count - 1)
    return min(max(math.ceil(scaled - 0.5), 0), bin_count - 1)


def bin_to_coordinate(index: int, bin_count: int) -> float:
    return index / (bin_count - 1)


def quantize_bbox(box: BBox, vocab: Vocabulary) -> list[int]:
    return [
        vocab.tag_id(BOX_START),
        *(
            vocab.bin_id(coordinate_to_bin(value, vocab.bin_count))
            for value in box.as_tuple()
        ),
        vocab.tag_id(BOX_END),
    ]


def dequantize_bbox(ids: Sequence[int], vocab: Vocabulary, *, start: int = 0) -> BBox:
    """
    Read a ``<b_st> bin bin bin bin <b_ed>`` frame. ``start`` is only used to
    report positions relative to an enclosing sequence.
    """
    if not ids or ids[0] != vocab.tag_id(BOX_START):
        raise exceptions.ParseError("Expected a box start tag", position=start)
    coordinates = []
    for offset in range(1, 5):
        if offset >= len(ids):
            raise exceptions.ParseError(
                "Box frame ended early", position=start + offset
            )
        token = ids[offset]
        if not vocab.is_in(token, Segment.BIN):
            raise exceptions.ParseError(
                f"Expected a bin token, got {vocab.describe(token)}",
                position=start + offset,
            )
        _, index = vocab.resolve(token)
        coordinates.append(bin_to_coordinate(index, vocab.bin_count))
    if len(ids) < BOX_TOKEN_COUNT or ids[5] != vocab.tag_id(BOX_END):
        raise exceptions.ParseError("Expected a box end tag", position=start + 5)
    x1, y1, x2, y2 = coordinates
    try:
        return BBox(x1=x1, y1=y1, x2=x2, y2=y2)
    except exceptions.BoxError as exc:
        raise exceptions.ParseError(str(exc), position=start + 1) from exc


def encode_category(
    class_index: int,
    vocab: Vocabulary,
    tokenizer: bpe.BpeTokenizer,
    names: Sequence[str],
) -> list[int]:
    if not 0 <= class_index < len(names):
        raise exceptions.UnknownCategory(str(class_index), candidates=[])
    return [
        vocab.tag_id(CAT_START),
        *bpe.encode_text(tokenizer, names[class_index], vocab),
        vocab.tag_id(CAT_END),
    ]
