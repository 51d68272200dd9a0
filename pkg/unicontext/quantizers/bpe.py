"""
Character-level byte-pair encoding over a declared alphabet.

Text is first split into pre-tokens (a word with its leading space, or a run of
spaces) and merges never cross a pre-token boundary. Token local ids are the
alphabet characters first, then one id per merge in training order.
"""

from __future__ import annotations

import collections
import functools
import json
import logging
import pathlib
from typing import Iterable, Sequence

import attr
import regex as re

from unicontext import exceptions
from unicontext.vocab import Segment, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
PRE_TOKEN_PATTERN = re.compile(r" ?[^ ]+| +")

Pair = tuple[int, int]


def pre_tokenize(text: str) -> list[str]:
    return PRE_TOKEN_PATTERN.findall(text)


def _merge_pair(ids: Sequence[int], pair: Pair, new_id: int) -> tuple[int, ...]:
    merged = []
    i = 0
    while i < len(ids):
        if i < len(ids) - 1 and (ids[i], ids[i + 1]) == pair:
            merged.append(new_id)
            i += 2
        else:
            merged.append(ids[i])
            i += 1
    return tuple(merged)


def _check_alphabet(instance, attribute, value: str) -> None:
    if not value:
        raise exceptions.TokenizerError("The alphabet cannot be empty")
    if len(set(value)) != len(value):
        raise exceptions.TokenizerError("The alphabet has duplicate characters")


@attr.dataclass(frozen=True, kw_only=True)
class BpeTokenizer:
    alphabet: str = attr.ib(validator=_check_alphabet)
    merges: tuple[Pair, ...] = attr.ib(converter=lambda v: tuple(map(tuple, v)))

    def __attrs_post_init__(self):
        for rank, (left, right) in enumerate(self.merges):
            limit = len(self.alphabet) + rank
            if not (0 <= left < limit and 0 <= right < limit):
                raise exceptions.TokenizerError(
                    f"Merge {rank} refers to a token that does not exist yet"
                )

    @property
    def size(self) -> int:
        return len(self.alphabet) + len(self.merges)

    @functools.cached_property
    def strings(self) -> list[str]:
        """
        Surface string of every local token id.
        """
        strings = list(self.alphabet)
        for left, right in self.merges:
            strings.append(strings[left] + strings[right])
        return strings

    @functools.cached_property
    def ranks(self) -> dict[Pair, int]:
        return {pair: rank for rank, pair in enumerate(self.merges)}

    def encode_local(self, text: str) -> list[int]:
        """
        Local token ids of ``text``, applying merges greedily by rank.
        """
        char_ids = {char: index for index, char in enumerate(self.alphabet)}
        ranks = self.ranks
        base = len(self.alphabet)
        output: list[int] = []
        for word in pre_tokenize(text):
            try:
                ids: tuple[int, ...] = tuple(char_ids[char] for char in word)
            except KeyError as exc:
                raise exceptions.TokenizerError(
                    f"Character {exc.args[0]!r} is not in the tokenizer alphabet"
                ) from exc
            while len(ids) > 1:
                pair = min(
                    zip(ids, ids[1:]), key=lambda p: ranks.get(p, len(ranks))
                )
                if pair not in ranks:
                    break
                ids = _merge_pair(ids, pair, base + ranks[pair])
            output.extend(ids)
        return output

    def decode_local(self, ids: Iterable[int]) -> str:
        strings = self.strings
        try:
            return "".join(strings[i] for i in ids)
        except IndexError as exc:
            raise exceptions.TokenOutOfRange(
                "Local id outside the tokenizer vocabulary"
            ) from exc

    # Serialization

    def dumps(self) -> str:
        lines = [json.dumps(self.alphabet)]
        lines.extend(f"{left} {right}" for left, right in self.merges)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> BpeTokenizer:
        lines = text.splitlines()
        try:
            alphabet = json.loads(lines[0])
            merges = [tuple(int(v) for v in line.split(" ")) for line in lines[1:]]
        except (IndexError, ValueError) as exc:
            raise exceptions.TokenizerError("Malformed tokenizer file") from exc
        if not isinstance(alphabet, str) or any(len(m) != 2 for m in merges):
            raise exceptions.TokenizerError("Malformed tokenizer file")
        return cls(alphabet=alphabet, merges=merges)

    def save(self, path: pathlib.Path) -> None:
        path.write_text(self.dumps())

    @classmethod
    def load(cls, path: pathlib.Path) -> BpeTokenizer:
        return cls.loads(path.read_text())


def train_bpe(
    corpus: Iterable[str], *, num_merges: int, alphabet: str = DEFAULT_ALPHABET
) -> BpeTokenizer:
    """
    Learn up to ``num_merges`` merges on ``corpus``. Each step merges the most
    frequent adjacent pair, ties going to the smallest (left, right) strings.
    Training stops early when no pair is left.
    """
    corpus = list(corpus)
    if not corpus:
        raise exceptions.TokenizerError("Cannot train a tokenizer on an empty corpus")

    tokenizer = BpeTokenizer(alphabet=alphabet, merges=())
    word_counts = collections.Counter(
        word for line in corpus for word in pre_tokenize(line)
    )
    words = {
        tuple(tokenizer.encode_local(word)): count
        for word, count in word_counts.items()
    }
    strings = list(alphabet)
    merges: list[Pair] = []

    for _ in range(num_merges):
        pair_counts: collections.Counter[Pair] = collections.Counter()
        for ids, count in words.items():
            for pair in zip(ids, ids[1:]):
                pair_counts[pair] += count
        if not pair_counts:
            break
        best = min(
            pair_counts,
            key=lambda p: (-pair_counts[p], strings[p[0]], strings[p[1]], p),
        )
        new_id = len(strings)
        strings.append(strings[best[0]] + strings[best[1]])
        merges.append(best)
        words = {_merge_pair(ids, best, new_id): count for ids, count in words.items()}

    logger.info(
        f"Trained tokenizer with {len(merges)} merges",
        extra={
            "action": "train_bpe",
            "merges": len(merges),
            "requested_merges": num_merges,
            "corpus_lines": len(corpus),
        },
    )
    return BpeTokenizer(alphabet=alphabet, merges=merges)


def encode_text(tokenizer: BpeTokenizer, text: str, vocab: Vocabulary) -> list[int]:
    offset = vocab.segment_offsets[Segment.TEXT]
    return [offset + local for local in tokenizer.encode_local(text)]


def decode_text(tokenizer: BpeTokenizer, ids: Iterable[int], vocab: Vocabulary) -> str:
    local_ids = []
    for token in ids:
        segment, local = vocab.resolve(token)
        if segment is not Segment.TEXT or local >= tokenizer.size:
            raise exceptions.TokenOutOfRange(f"Token {token} is not a text token")
        local_ids.append(local)
    return tokenizer.decode_local(local_ids)
