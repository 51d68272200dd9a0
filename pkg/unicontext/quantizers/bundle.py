from __future__ import annotations

import json
import logging
import pathlib

import attr
import numpy as np

from unicontext import exceptions, synthdata
from unicontext.quantizers import bpe, codebook
from unicontext.vocab import Vocabulary, build_vocabulary

logger = logging.getLogger(__name__)

VOCAB_FILE = "vocab.txt"
CODEBOOK_FILE = "codebook.txt"
BPE_FILE = "bpe.txt"
CLASSES_FILE = "classes.txt"


@attr.dataclass(frozen=True, kw_only=True)
class Quantizers:
    """
    Everything needed to turn scenes into tokens and back.
    """

    vocab: Vocabulary
    codebook: codebook.Codebook
    tokenizer: bpe.BpeTokenizer
    class_names: tuple[str, ...]

    def save(self, path: pathlib.Path) -> None:
        path.mkdir(parents=True, exist_ok=True)
        (path / VOCAB_FILE).write_text(self.vocab.to_manifest())
        self.codebook.save(path / CODEBOOK_FILE)
        self.tokenizer.save(path / BPE_FILE)
        (path / CLASSES_FILE).write_text(
            "".join(json.dumps(name) + "\n" for name in self.class_names)
        )

    @classmethod
    def load(cls, path: pathlib.Path) -> Quantizers:
        try:
            vocab = Vocabulary.from_manifest((path / VOCAB_FILE).read_text())
            names = tuple(
                json.loads(line)
                for line in (path / CLASSES_FILE).read_text().splitlines()
            )
            quantizers = cls(
                vocab=vocab,
                codebook=codebook.Codebook.load(path / CODEBOOK_FILE),
                tokenizer=bpe.BpeTokenizer.load(path / BPE_FILE),
                class_names=names,
            )
        except FileNotFoundError as exc:
            raise exceptions.DatasetError(
                f"Tokenizers not found in {path}, run train-tokenizers first"
            ) from exc
        quantizers.check()
        return quantizers

    def check(self) -> None:
        if self.vocab.text_size != self.tokenizer.size:
            raise exceptions.VocabularyError(
                f"Text segment has {self.vocab.text_size} tokens but the tokenizer "
                f"has {self.tokenizer.size}"
            )
        if self.vocab.image_code_count != self.codebook.size:
            raise exceptions.VocabularyError(
                f"Image segment has {self.vocab.image_code_count} tokens but the "
                f"codebook has {self.codebook.size}"
            )


def scene_patches(dataset: synthdata.Dataset) -> np.ndarray:
    """
    Patches of every train image and class mask, plus one flat patch per
    palette color.
    """
    patch_size = dataset.config.patch_size
    chunks = [synthdata.palette_patches(patch_size)]
    for scene in dataset.train:
        chunks.append(codebook.image_to_patches(scene.image, patch_size))
        for obj in scene.objects:
            mask_image = scene.mask_image(obj.class_index)
            chunks.append(codebook.image_to_patches(mask_image, patch_size))
    return np.concatenate(chunks)


def train_quantizers(dataset: synthdata.Dataset) -> Quantizers:
    config = dataset.config
    trained_codebook = codebook.train_codebook(
        scene_patches(dataset),
        k=config.codebook_size,
        iters=config.codebook_iters,
        seed=config.seed,
        pinned=synthdata.pinned_patches(config.patch_size),
    )
    tokenizer = bpe.train_bpe(dataset.captions_corpus(), num_merges=config.bpe_merges)
    quantizers = Quantizers(
        vocab=build_vocabulary(
            text_size=tokenizer.size, image_code_count=trained_codebook.size
        ),
        codebook=trained_codebook,
        tokenizer=tokenizer,
        class_names=dataset.class_names,
    )
    logger.info(
        f"Trained quantizers, vocabulary of {quantizers.vocab.total_size} tokens",
        extra={
            "action": "train_quantizers",
            "text_size": tokenizer.size,
            "image_code_count": trained_codebook.size,
        },
    )
    return quantizers
