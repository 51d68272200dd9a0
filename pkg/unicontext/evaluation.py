"""
Evaluation harness for the two in-context tasks.

Every query gets its in-context samples drawn once, for the largest ``k`` of
the sweep. Smaller ``k`` use a prefix of the same samples, so the prompts of a
sweep are nested. A generation that cannot be parsed scores 0 (MAE 1) and
counts in the malformed rate.
"""

from __future__ import annotations

import logging
import pathlib
from typing import Sequence

import attr
import numpy as np

from unicontext import exceptions, metrics, prompts, sampling, synthdata, tasks
from unicontext.model import DecoderModel
from unicontext.quantizers import annotations
from unicontext.vocab import EOC

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("task", "k", "metric", "value", "malformed_rate", "n_items")


@attr.dataclass(frozen=True, kw_only=True)
class EvalConfig:
    """
    Attributes
    ----------
    ks :
        Numbers of in-context samples to evaluate.
    seed :
        Seed of the in-context sample draws.
    split :
        Evaluated split.
    max_items :
        Evaluate at most this many queries per task, 0 for all of them.
    """

    ks: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    split: str = "val"
    max_items: int = 0

    def __attrs_post_init__(self):
        if not self.ks or any(k < 0 for k in self.ks):
            raise exceptions.ConfigError("ks must be a non-empty list of k >= 0")
        if self.split not in ("train", "val"):
            raise exceptions.ConfigError("split must be train or val")
        if self.max_items < 0:
            raise exceptions.ConfigError("max_items must be >= 0")


@attr.dataclass(frozen=True, kw_only=True)
class SegMetrics:
    miou: float
    mae: float
    malformed_rate: float
    n_items: int

    def values(self) -> dict[str, float]:
        return {"miou": self.miou, "mae": self.mae}


@attr.dataclass(frozen=True, kw_only=True)
class CapMetrics:
    bleu4: float
    map_lite: float
    box_iou: float
    malformed_rate: float
    n_items: int

    def values(self) -> dict[str, float]:
        return {"bleu4": self.bleu4, "map_lite": self.map_lite, "box_iou": self.box_iou}


@attr.dataclass(frozen=True, kw_only=True)
class EvalItem:
    query: synthdata.PoolEntry
    contexts: tuple[synthdata.PoolEntry, ...]


@attr.dataclass(frozen=True, kw_only=True)
class ReportRow:
    task: str
    k: int
    metric: str
    value: float
    malformed_rate: float
    n_items: int


def draw_items(
    task: tasks.Task, k: int, *, seed: int, max_items: int = 0
) -> list[EvalItem]:
    """
    Queries of ``task`` with ``k`` in-context samples each. Queries whose class
    has fewer than ``k`` other scenes are left out.
    """
    if not task.items:
        raise exceptions.EmptyDataset(f"No {task.split} item for {task.name}")
    rng = np.random.default_rng([seed, tasks.TASK_NAMES.index(task.name)])
    queries = task.items
    if max_items and max_items < len(queries):
        chosen = sorted(rng.choice(len(queries), size=max_items, replace=False))
        queries = [queries[int(i)] for i in chosen]

    items = []
    for query in queries:
        try:
            contexts = task.contexts_for(query, k, rng)
        except exceptions.InsufficientPool as exc:
            logger.warning(
                f"Skipping query {query}: {exc}",
                extra={
                    "action": "skip_eval_query",
                    "scene_id": query.scene_id,
                    "class_index": exc.class_index,
                },
            )
            continue
        items.append(EvalItem(query=query, contexts=tuple(contexts)))
    if not items:
        raise exceptions.EmptyDataset(
            f"No {task.name} query has {k} in-context samples available"
        )
    return items


def predict_mask(
    model: DecoderModel,
    task: tasks.SegmentationTask,
    query: synthdata.PoolEntry,
    contexts: Sequence[synthdata.PoolEntry],
) -> np.ndarray:
    """
    Greedy segmentation of ``query``, a boolean (height, width) mask. Raises
    `ParseError` on a malformed generation.
    """
    quantizers = task.quantizers
    prompt = task.prompt(query, contexts, training=False)
    tokens_per_image = len(task.image_tokens(query.scene_id))
    output = sampling.generate(
        model,
        prompt.ids,
        max_new=tokens_per_image + 1,
        stop=quantizers.vocab.tag_id(EOC),
    )
    size = task.dataset.config.image_size
    return prompts.parse_segmentation(
        list(prompt.ids) + output, quantizers.vocab, quantizers.codebook, size, size
    )


def predict_caption(
    model: DecoderModel,
    task: tasks.CaptioningTask,
    query: synthdata.PoolEntry,
    contexts: Sequence[synthdata.PoolEntry],
) -> prompts.CaptionRecord:
    """
    Greedy region caption of ``query``. Raises `ParseError` on a malformed
    generation.
    """
    quantizers = task.quantizers
    eoc = quantizers.vocab.tag_id(EOC)
    prompt = task.prompt(query, contexts, training=False)
    max_new = annotations.BOX_TOKEN_COUNT + task.caption_budget + 1
    output = sampling.generate(model, prompt.ids, max_new=max_new, stop=eoc)
    if len(output) < max_new:
        output.append(eoc)
    return prompts.parse_captioning(
        list(prompt.ids) + output,
        quantizers.vocab,
        quantizers.tokenizer,
        quantizers.class_names,
    )


def _log_malformed(task: str, query: synthdata.PoolEntry, exc: Exception) -> None:
    logger.debug(
        f"Malformed {task} output for scene {query.scene_id}: {exc}",
        extra={"action": "malformed_output", "task": task, "scene_id": query.scene_id},
    )


def evaluate_segmentation(
    model: DecoderModel,
    task: tasks.SegmentationTask,
    k: int,
    items: Sequence[EvalItem],
) -> SegMetrics:
    if not items:
        raise exceptions.EmptyDataset("Nothing to evaluate")
    preds, gts = [], []
    malformed = 0
    for item in items:
        gt = task.scenes[item.query.scene_id].objects[item.query.object_index].mask
        try:
            pred = predict_mask(model, task, item.query, item.contexts[:k])
        except exceptions.ParseError as exc:
            _log_malformed(task.name, item.query, exc)
            malformed += 1
            # Scores 0 IoU and MAE 1
            pred = ~gt
        preds.append(pred)
        gts.append(gt)
    return SegMetrics(
        miou=metrics.miou(preds, gts),
        mae=metrics.mae(preds, gts),
        malformed_rate=malformed / len(items),
        n_items=len(items),
    )


def evaluate_captioning(
    model: DecoderModel,
    task: tasks.CaptioningTask,
    k: int,
    items: Sequence[EvalItem],
) -> CapMetrics:
    if not items:
        raise exceptions.EmptyDataset("Nothing to evaluate")
    bleus, maps, box_ious = [], [], []
    malformed = 0
    for item in items:
        target = task.scenes[item.query.scene_id].objects[item.query.object_index]
        try:
            record = predict_caption(model, task, item.query, item.contexts[:k])
        except exceptions.ParseError as exc:
            _log_malformed(task.name, item.query, exc)
            malformed += 1
            bleus.append(0.0)
            maps.append(0.0)
            box_ious.append(0.0)
            continue
        bleus.append(metrics.bleu4(record.caption, [target.caption]))
        maps.append(
            metrics.map_lite(
                [(record.bbox, record.caption)], [(target.bbox, target.caption)]
            )
        )
        box_ious.append(record.bbox.iou(target.bbox))
    return CapMetrics(
        bleu4=float(np.mean(bleus)),
        map_lite=float(np.mean(maps)),
        box_iou=float(np.mean(box_ious)),
        malformed_rate=malformed / len(items),
        n_items=len(items),
    )


def evaluate(
    model: DecoderModel, task_list: Sequence[tasks.Task], config: EvalConfig
) -> list[ReportRow]:
    """
    Run the ``k`` sweep on every task and return the report rows.
    """
    rows = []
    for task in task_list:
        items = draw_items(
            task, max(config.ks), seed=config.seed, max_items=config.max_items
        )
        for k in config.ks:
            result: SegMetrics | CapMetrics
            if isinstance(task, tasks.SegmentationTask):
                result = evaluate_segmentation(model, task, k, items)
            elif isinstance(task, tasks.CaptioningTask):
                result = evaluate_captioning(model, task, k, items)
            else:
                raise exceptions.ConfigError(f"Cannot evaluate task {task.name}")
            summary = ", ".join(
                f"{name}={value:.4f}" for name, value in result.values().items()
            )
            logger.info(
                f"{task.name} k={k}: {summary}, "
                f"malformed={result.malformed_rate:.2%}",
                extra={
                    "action": "evaluate",
                    "task": task.name,
                    "k": k,
                    "n_items": result.n_items,
                    "malformed_rate": result.malformed_rate,
                    **result.values(),
                },
            )
            rows.extend(
                ReportRow(
                    task=task.name,
                    k=k,
                    metric=name,
                    value=value,
                    malformed_rate=result.malformed_rate,
                    n_items=result.n_items,
                )
                for name, value in result.values().items()
            )
    return rows


def format_report(rows: Sequence[ReportRow]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(
            f"{row.task}\t{row.k}\t{row.metric}\t{row.value:.6f}\t"
            f"{row.malformed_rate:.6f}\t{row.n_items}"
        )
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[ReportRow], path: pathlib.Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(rows))
    logger.info(
        f"Wrote {len(rows)} report row(s) to {path}",
        extra={"action": "write_report", "path": str(path), "rows": len(rows)},
    )
