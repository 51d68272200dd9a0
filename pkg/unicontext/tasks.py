"""
The two class-aware in-context tasks, and the unmixed multi-task sampler.

An item is one object of one scene. Its class selects the in-context samples:
``k`` other objects of the same class, each from a different scene than the
query.
"""

from __future__ import annotations

import abc
import logging
import math
from typing import Sequence

import numpy as np

from unicontext import exceptions, prompts, synthdata
from unicontext.quantizers import codebook
from unicontext.quantizers.bundle import Quantizers
from unicontext.vocab import PAD

logger = logging.getLogger(__name__)

SEGMENTATION = "segmentation"
CAPTIONING = "captioning"
TASK_NAMES = (SEGMENTATION, CAPTIONING)
MAX_RESAMPLES = 20


class Task(abc.ABC):
    """
    Prompt source for one task over one split of a dataset.
    """

    name: str

    def __init__(
        self,
        dataset: synthdata.Dataset,
        quantizers: Quantizers,
        *,
        split: str = "train",
        max_positions: int | None = None,
    ):
        self.dataset = dataset
        self.quantizers = quantizers
        self.split = split
        self.max_positions = max_positions
        self.scenes = {scene.scene_id: scene for scene in dataset.split(split)}
        self.pool = synthdata.build_pools(self.scenes.values())
        self.items = sorted(
            (entry for entries in self.pool.entries.values() for entry in entries),
            key=lambda entry: (entry.scene_id, entry.object_index),
        )
        self._image_tokens: dict[int, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.items)

    def image_tokens(self, scene_id: int) -> tuple[int, ...]:
        if scene_id not in self._image_tokens:
            self._image_tokens[scene_id] = tuple(
                codebook.quantize_image(
                    self.scenes[scene_id].image,
                    self.quantizers.codebook,
                    self.quantizers.vocab,
                )
            )
        return self._image_tokens[scene_id]

    def class_of(self, entry: synthdata.PoolEntry) -> int:
        return self.scenes[entry.scene_id].objects[entry.object_index].class_index

    def contexts_for(
        self, query: synthdata.PoolEntry, k: int, rng: np.random.Generator
    ) -> list[synthdata.PoolEntry]:
        return synthdata.sample_in_context(
            self.pool, self.class_of(query), k, rng, exclude=query.scene_id
        )

    def draw(
        self, k: int, rng: np.random.Generator
    ) -> tuple[synthdata.PoolEntry, list[synthdata.PoolEntry]]:
        """
        Draw a query item and ``k`` in-context items of its class. Items whose
        class has too few other scenes are replaced by a fresh draw.
        """
        if not self.items:
            raise exceptions.EmptyDataset(f"No {self.split} item for {self.name}")
        last_error: exceptions.InsufficientPool | None = None
        for _ in range(MAX_RESAMPLES):
            query = self.items[int(rng.integers(len(self.items)))]
            try:
                return query, self.contexts_for(query, k, rng)
            except exceptions.InsufficientPool as exc:
                last_error = exc
        assert last_error
        raise last_error

    def sample_example(
        self, k: int, rng: np.random.Generator
    ) -> prompts.PromptSequence:
        query, contexts = self.draw(k, rng)
        return self.prompt(query, contexts, training=True)

    @abc.abstractmethod
    def prompt(
        self,
        query: synthdata.PoolEntry,
        contexts: Sequence[synthdata.PoolEntry],
        *,
        training: bool,
    ) -> prompts.PromptSequence:
        """
        Assemble the prompt of ``query``. The training layout appends the
        supervised query target.
        """


class SegmentationTask(Task):
    name = SEGMENTATION

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._mask_tokens: dict[tuple[int, int], tuple[int, ...]] = {}

    def mask_tokens(self, scene_id: int, class_index: int) -> tuple[int, ...]:
        key = (scene_id, class_index)
        if key not in self._mask_tokens:
            self._mask_tokens[key] = tuple(
                codebook.quantize_image(
                    self.scenes[scene_id].mask_image(class_index),
                    self.quantizers.codebook,
                    self.quantizers.vocab,
                )
            )
        return self._mask_tokens[key]

    def sample(self, entry: synthdata.PoolEntry) -> prompts.SegSample:
        return prompts.SegSample(
            image_tokens=self.image_tokens(entry.scene_id),
            mask_tokens=self.mask_tokens(entry.scene_id, self.class_of(entry)),
        )

    def prompt(self, query, contexts, *, training):
        return prompts.assemble_segmentation(
            [self.sample(entry) for entry in contexts],
            self.image_tokens(query.scene_id),
            self.quantizers.vocab,
            query_mask=(
                self.mask_tokens(query.scene_id, self.class_of(query))
                if training
                else None
            ),
            max_positions=self.max_positions,
        )


class CaptioningTask(Task):
    name = CAPTIONING

    def __init__(self, *args, pad_to_budget: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.pad_to_budget = pad_to_budget

    @property
    def caption_budget(self) -> int:
        return self.dataset.config.caption_budget

    def sample(self, entry: synthdata.PoolEntry) -> prompts.CapSample:
        obj = self.scenes[entry.scene_id].objects[entry.object_index]
        return prompts.CapSample(
            image_tokens=self.image_tokens(entry.scene_id),
            category=obj.class_index,
            bbox=obj.bbox,
            caption=obj.caption,
        )

    def prompt(self, query, contexts, *, training):
        target = self.scenes[query.scene_id].objects[query.object_index]
        return prompts.assemble_captioning(
            [self.sample(entry) for entry in contexts],
            self.image_tokens(query.scene_id),
            target.class_index,
            self.quantizers.vocab,
            self.quantizers.tokenizer,
            self.quantizers.class_names,
            query_target=(target.bbox, target.caption) if training else None,
            caption_budget=self.caption_budget,
            pad_to_budget=self.pad_to_budget,
            max_positions=self.max_positions,
        )


def build_task(
    name: str,
    dataset: synthdata.Dataset,
    quantizers: Quantizers,
    *,
    split: str = "train",
    max_positions: int | None = None,
    pad_captions: bool = False,
) -> Task:
    if name == SEGMENTATION:
        return SegmentationTask(
            dataset, quantizers, split=split, max_positions=max_positions
        )
    if name == CAPTIONING:
        return CaptioningTask(
            dataset,
            quantizers,
            split=split,
            max_positions=max_positions,
            pad_to_budget=pad_captions,
        )
    raise exceptions.ConfigError(
        f"Unknown task {name!r}, expected one of {', '.join(TASK_NAMES)}"
    )


# Sampling


def task_probabilities(sizes: Sequence[int]) -> np.ndarray:
    """
    Draw probability of every task, proportional to the square root of its
    dataset size.
    """
    if not sizes or any(size <= 0 for size in sizes):
        raise exceptions.ConfigError(f"Dataset sizes must be positive, got {sizes}")
    roots = np.array([math.sqrt(size) for size in sizes])
    return roots / roots.sum()


def sample_task(rng: np.random.Generator, sizes: Sequence[int]) -> int:
    probabilities = task_probabilities(sizes)
    if len(probabilities) == 1:
        return 0
    return int(rng.choice(len(probabilities), p=probabilities))


def next_batch(
    task: Task, *, batch_size: int, k: int, rng: np.random.Generator
) -> prompts.Batch:
    """
    A single-task batch, every sequence with freshly drawn in-context samples.
    """
    sequences = [task.sample_example(k, rng) for _ in range(batch_size)]
    return prompts.collate(
        task.name, sequences, task.quantizers.vocab.tag_id(PAD)
    )


class TaskSampler:
    """
    Unmixed batch sampling: the task of every batch is drawn with probability
    proportional to the square root of its dataset size, then the whole batch
    comes from that task.
    """

    def __init__(
        self,
        tasks: Sequence[Task],
        *,
        batch_size: int,
        k: int,
        seed: int,
        sizes: Sequence[int] | None = None,
    ):
        if not tasks:
            raise exceptions.ConfigError("At least one task is needed")
        self.tasks = list(tasks)
        self.batch_size = batch_size
        self.k = k
        self.sizes = list(sizes) if sizes else [task.size for task in self.tasks]
        self.probabilities = task_probabilities(self.sizes)
        self.rng = np.random.default_rng(seed)
        logger.debug(
            "Task sampling probabilities "
            + ", ".join(
                f"{task.name}={p:.3f}"
                for task, p in zip(self.tasks, self.probabilities)
            ),
            extra={
                "action": "task_probabilities",
                "sizes": self.sizes,
                "probabilities": self.probabilities.tolist(),
            },
        )

    def next_batch(self) -> prompts.Batch:
        task = self.tasks[sample_task(self.rng, self.sizes)]
        return next_batch(task, batch_size=self.batch_size, k=self.k, rng=self.rng)
