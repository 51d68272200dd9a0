"""
The unified discrete token space. Text tokens, image codes, coordinate bins and
special tags live in contiguous segments, always in that order.
"""

from __future__ import annotations

import logging
from enum import Enum
from typing import Iterable

import attr

from unicontext import exceptions

logger = logging.getLogger(__name__)

BOI = "[BOI]"
BOT = "[BOT]"
EOC = "[EOC]"
CAT_START = "<c_st>"
CAT_END = "<c_ed>"
BOX_START = "<b_st>"
BOX_END = "<b_ed>"
PAD = "[PAD]"

SPECIAL_TAGS = (BOI, BOT, EOC, CAT_START, CAT_END, BOX_START, BOX_END, PAD)
BIN_COUNT = 1001

MANIFEST_HEADER = "unicontext-vocabulary 1"


class Segment(Enum):
    """
    Kinds of tokens, in vocabulary order.
    """

    TEXT = "text"
    IMAGE = "image"
    BIN = "bin"
    SPECIAL = "special"


def _check_tags(instance, attribute, value: tuple[str, ...]) -> None:
    if len(set(value)) != len(value):
        duplicates = sorted({tag for tag in value if value.count(tag) > 1})
        raise exceptions.VocabularyError(
            f"Duplicate special tag(s): {', '.join(duplicates)}"
        )
    if any(not tag or tag != tag.strip() for tag in value):
        raise exceptions.VocabularyError(
            "Special tags must be non-empty and without surrounding whitespace"
        )


def _check_positive(instance, attribute, value: int) -> None:
    if value < 1:
        raise exceptions.VocabularyError(f"{attribute.name} must be >= 1, got {value}")


@attr.dataclass(frozen=True, kw_only=True)
class Vocabulary:
    """
    Partition of the token id space.

    Attributes
    ----------
    text_size :
        Number of text (BPE) tokens.
    image_code_count :
        Number of codebook entries.
    bin_count :
        Number of coordinate bins, ``<bin_0>`` to ``<bin_{bin_count - 1}>``.
    special_tags :
        Names of the special tags, in id order.
    """

    text_size: int = attr.ib(validator=_check_positive)
    image_code_count: int = attr.ib(validator=_check_positive)
    bin_count: int = attr.ib(default=BIN_COUNT, validator=_check_positive)
    special_tags: tuple[str, ...] = attr.ib(
        default=SPECIAL_TAGS, converter=tuple, validator=_check_tags
    )

    @property
    def segment_sizes(self) -> dict[Segment, int]:
        return {
            Segment.TEXT: self.text_size,
            Segment.IMAGE: self.image_code_count,
            Segment.BIN: self.bin_count,
            Segment.SPECIAL: len(self.special_tags),
        }

    @property
    def segment_offsets(self) -> dict[Segment, int]:
        offsets = {}
        offset = 0
        for segment, size in self.segment_sizes.items():
            offsets[segment] = offset
            offset += size
        return offsets

    @property
    def total_size(self) -> int:
        return sum(self.segment_sizes.values())

    def segment_range(self, segment: Segment) -> range:
        start = self.segment_offsets[segment]
        return range(start, start + self.segment_sizes[segment])

    def token_id(self, segment: Segment, local_index: int) -> int:
        size = self.segment_sizes[segment]
        if not 0 <= local_index < size:
            raise exceptions.TokenOutOfRange(
                f"Local index {local_index} outside {segment.value} segment "
                f"of size {size}"
            )
        return self.segment_offsets[segment] + local_index

    def resolve(self, token_id: int) -> tuple[Segment, int]:
        """
        Inverse of `token_id`: returns the segment and the local index of a
        token id.
        """
        if not 0 <= token_id < self.total_size:
            raise exceptions.TokenOutOfRange(
                f"Token id {token_id} outside vocabulary of size {self.total_size}"
            )
        for segment, offset in reversed(self.segment_offsets.items()):
            if token_id >= offset:
                return segment, token_id - offset
        raise AssertionError("unreachable")  # coverage: exclude

    def segment_of(self, token_id: int) -> Segment:
        return self.resolve(token_id)[0]

    def is_in(self, token_id: int, segment: Segment) -> bool:
        return token_id in self.segment_range(segment)

    # Shortcuts

    def image_id(self, code: int) -> int:
        return self.token_id(Segment.IMAGE, code)

    def bin_id(self, index: int) -> int:
        return self.token_id(Segment.BIN, index)

    def tag_id(self, name: str) -> int:
        try:
            index = self.special_tags.index(name)
        except ValueError as exc:
            raise exceptions.TokenOutOfRange(f"Unknown special tag {name!r}") from exc
        return self.token_id(Segment.SPECIAL, index)

    def describe(self, token_id: int) -> str:
        """
        Human readable rendering of a single token, without text decoding.
        """
        segment, local = self.resolve(token_id)
        if segment is Segment.SPECIAL:
            return self.special_tags[local]
        if segment is Segment.BIN:
            return f"<bin_{local}>"
        if segment is Segment.IMAGE:
            return f"<img_{local}>"
        return f"<txt_{local}>"

    def segment_table(self) -> list[int]:
        """
        For every token id, the position of its segment in `Segment`.
        """
        kinds = list(Segment)
        table: list[int] = []
        for segment, size in self.segment_sizes.items():
            table.extend([kinds.index(segment)] * size)
        return table

    # Serialization

    def to_manifest(self) -> str:
        lines = [MANIFEST_HEADER]
        offsets = self.segment_offsets
        for segment, size in self.segment_sizes.items():
            lines.append(f"segment {segment.value} {offsets[segment]} {size}")
        lines.extend(f"tag {tag}" for tag in self.special_tags)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> Vocabulary:
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise exceptions.VocabularyError("Not a vocabulary manifest")
        sizes: dict[str, int] = {}
        tags: list[str] = []
        expected_offset = 0
        for line in lines[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "segment":
                name, offset, size = rest.split(" ")
                if int(offset) != expected_offset:
                    raise exceptions.VocabularyError(
                        f"Segment {name} is not contiguous (offset {offset})"
                    )
                sizes[name] = int(size)
                expected_offset += int(size)
            elif kind == "tag":
                tags.append(rest)
            else:
                raise exceptions.VocabularyError(f"Invalid manifest line: {line!r}")

        if list(sizes) != [segment.value for segment in Segment]:
            raise exceptions.VocabularyError("Manifest segments are out of order")
        if sizes[Segment.SPECIAL.value] != len(tags):
            raise exceptions.VocabularyError(
                "Special segment size does not match the tag list"
            )
        return build_vocabulary(
            text_size=sizes[Segment.TEXT.value],
            image_code_count=sizes[Segment.IMAGE.value],
            bin_count=sizes[Segment.BIN.value],
            special_tags=tags,
        )


def build_vocabulary(
    *,
    text_size: int,
    image_code_count: int,
    bin_count: int = BIN_COUNT,
    special_tags: Iterable[str] = SPECIAL_TAGS,
) -> Vocabulary:
    vocab = Vocabulary(
        text_size=text_size,
        image_code_count=image_code_count,
        bin_count=bin_count,
        special_tags=tuple(special_tags),
    )
    logger.debug(
        f"Built vocabulary of {vocab.total_size} tokens",
        extra={
            "action": "build_vocabulary",
            "offsets": {k.value: v for k, v in vocab.segment_offsets.items()},
        },
    )
    return vocab
