from __future__ import annotations

import abc
import logging
from typing import Sequence

import torch

from unicontext import exceptions
from unicontext.model import DecoderModel

logger = logging.getLogger(__name__)


class SamplingStrategy(abc.ABC):
    @abc.abstractmethod
    def choose(self, logits: torch.Tensor) -> int:
        """
        Pick a token id from the scores of one position.
        """


class Greedy(SamplingStrategy):
    """
    Highest score, lowest index on ties.
    """

    def choose(self, logits: torch.Tensor) -> int:
        # argmax returns the first maximal index
        return int(torch.argmax(logits))

    def __repr__(self) -> str:
        return "Greedy()"


class Temperature(SamplingStrategy):
    """
    Draw from ``softmax(logits / tau)``. Draws are reproducible for a given
    seed. As ``tau`` goes to 0 this tends to `Greedy`.
    """

    def __init__(self, tau: float, seed: int):
        if not tau > 0:
            raise exceptions.SamplingError(f"Temperature must be > 0, got {tau}")
        self.tau = tau
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def choose(self, logits: torch.Tensor) -> int:
        probabilities = torch.softmax(logits.double() / self.tau, dim=-1)
        return int(torch.multinomial(probabilities, 1, generator=self.generator))

    def __repr__(self) -> str:
        return f"Temperature(tau={self.tau}, seed={self.seed})"


def sample_next(logits: torch.Tensor, strategy: SamplingStrategy) -> int:
    if not bool(torch.isfinite(logits).all()):
        raise exceptions.SamplingError("Cannot sample from non-finite scores")
    return strategy.choose(logits)


@torch.no_grad()
def generate(
    model: DecoderModel,
    prefix: Sequence[int],
    *,
    max_new: int,
    stop: int,
    strategy: SamplingStrategy | None = None,
) -> list[int]:
    """
    Extend ``prefix`` one token at a time until ``stop`` is sampled or
    ``max_new`` tokens were produced. Returns the new tokens, ``stop``
    excluded.
    """
    limit = model.config.max_positions
    if len(prefix) + max_new > limit:
        raise exceptions.SequenceTooLong(length=len(prefix) + max_new, limit=limit)
    if max_new == 0:
        return []
    if not prefix:
        raise exceptions.PromptError("Generation needs a non-empty prefix")
    strategy = strategy or Greedy()

    was_training = model.training
    model.eval()
    ids = list(prefix)
    new_tokens: list[int] = []
    try:
        for _ in range(max_new):
            logits = model(torch.tensor(ids, dtype=torch.long)).logits[0, -1]
            token = sample_next(logits, strategy)
            if token == stop:
                break
            ids.append(token)
            new_tokens.append(token)
    finally:
        model.train(was_training)

    logger.debug(
        f"Generated {len(new_tokens)} token(s)",
        extra={
            "action": "generate",
            "prefix_length": len(prefix),
            "generated": len(new_tokens),
            "strategy": repr(strategy),
        },
    )
    return new_tokens
