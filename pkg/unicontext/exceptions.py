from __future__ import annotations


class UnicontextError(Exception):
    """
    Unexpected unicontext error.
    """

    def __init__(self, message=None):
        if not message:
            message = self.__doc__
        super().__init__(message)


class VocabularyError(UnicontextError, ValueError):
    """
    The vocabulary cannot be built with the given segment sizes or tags.
    """


class TokenOutOfRange(VocabularyError):
    """
    A token id does not belong to the vocabulary, or not to the expected
    segment.
    """


class CodebookError(UnicontextError, ValueError):
    """
    The codebook is invalid or cannot be trained on the given patches.
    """


class ImageShapeError(UnicontextError, ValueError):
    """
    Image dimensions are not compatible with the codebook patch size.
    """


class TokenizerError(UnicontextError, ValueError):
    """
    The text tokenizer cannot be trained or cannot encode the given text.
    """


class BoxError(UnicontextError, ValueError):
    """
    Bounding box coordinates must satisfy 0 <= x1 <= x2 <= 1 and
    0 <= y1 <= y2 <= 1.
    """


class ParseError(UnicontextError):
    """
    Token sequence does not follow the expected grammar.
    """

    def __init__(self, message=None, *, position: int | None = None):
        if message and position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class IncompleteOutput(ParseError):
    """
    Generated output ended before all expected tokens were produced.
    """

    def __init__(self, message=None, *, count: int, expected: int):
        super().__init__(
            message or f"Expected {expected} image tokens, got {count}"
        )
        self.count = count
        self.expected = expected


class UnknownCategory(ParseError):
    """
    Category name is not part of the class table.
    """

    def __init__(self, name: str, candidates: list[str]):
        message = f"Unknown category {name!r}"
        if candidates:
            message += f", closest matches: {', '.join(candidates)}"
        super().__init__(message)
        self.name = name
        self.candidates = candidates


class PromptError(UnicontextError, ValueError):
    """
    In-context samples cannot be assembled into a prompt.
    """


class SequenceTooLong(PromptError):
    """
    Sequence exceeds the maximum number of positions.
    """

    def __init__(self, length: int, limit: int):
        super().__init__(
            f"Sequence of length {length} exceeds max_positions={limit}"
        )
        self.length = length
        self.limit = limit


class ModelConfigError(UnicontextError, ValueError):
    """
    Model configuration is inconsistent.
    """


class SamplingError(UnicontextError, ValueError):
    """
    Sampling strategy is invalid.
    """


class EmptySupervision(UnicontextError):
    """
    No position is selected by the loss mask.
    """


class NonFiniteGradient(UnicontextError):
    """
    A gradient contains NaN or infinite values.
    """

    def __init__(self, parameter: str):
        super().__init__(f"Non-finite gradient for parameter {parameter!r}")
        self.parameter = parameter


class NonFiniteLoss(UnicontextError):
    """
    Training loss became NaN or infinite. The last good checkpoint was kept.
    """

    def __init__(self, step: int, checkpoint: str | None):
        super().__init__(
            f"Non-finite loss at step {step}, last good checkpoint: {checkpoint}"
        )
        self.step = step
        self.checkpoint = checkpoint


class InsufficientPool(UnicontextError):
    """
    Not enough in-context samples in the pool for the requested class.
    """

    def __init__(self, class_index: int, deficit: int):
        super().__init__(
            f"Pool for class {class_index} is short of {deficit} sample(s)"
        )
        self.class_index = class_index
        self.deficit = deficit


class DatasetError(UnicontextError):
    """
    Dataset directory is missing, corrupted or inconsistent.
    """


class EmptyDataset(DatasetError):
    """
    There is nothing to evaluate.
    """


class CheckpointError(UnicontextError):
    """
    Checkpoint file cannot be read.
    """


class ConfigError(UnicontextError, ValueError):
    """
    Configuration file or override is invalid.
    """
