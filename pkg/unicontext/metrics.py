"""
Segmentation and captioning scores. Every score lies in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from unicontext import exceptions
from unicontext.quantizers.annotations import BBox

BLEU_ORDER = 4
IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
BLEU_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4)


def _check_pairs(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> None:
    if len(preds) != len(gts):
        raise exceptions.ImageShapeError(
            f"{len(preds)} predicted masks for {len(gts)} ground truth masks"
        )
    for index, (pred, gt) in enumerate(zip(preds, gts)):
        if np.shape(pred) != np.shape(gt):
            raise exceptions.ImageShapeError(
                f"Mask {index}: prediction {np.shape(pred)} vs "
                f"ground truth {np.shape(gt)}"
            )


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    ``|pred ∩ gt| / |pred ∪ gt|``, 1.0 when both masks are empty.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    _check_pairs(preds, gts)
    if not preds:
        return 0.0
    return float(np.mean([mask_iou(pred, gt) for pred, gt in zip(preds, gts)]))


def mae(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """
    Mean absolute pixel difference, averaged per mask then over masks.
    """
    _check_pairs(preds, gts)
    if not preds:
        return 0.0
    errors = [
        np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
        for pred, gt in zip(preds, gts)
    ]
    return float(np.mean([error.mean() for error in errors]))


# BLEU


def normalize_caption(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) + 1 - n))


def modified_precision(
    candidate: Sequence[str], references: Sequence[Sequence[str]], n: int
) -> tuple[int, int]:
    """
    Clipped n-gram matches and candidate n-gram count.
    """
    counts = _ngrams(candidate, n)
    max_counts: Counter = Counter()
    for reference in references:
        max_counts |= _ngrams(reference, n)
    clipped = sum(min(count, max_counts[ngram]) for ngram, count in counts.items())
    return clipped, sum(counts.values())


def brevity_penalty(candidate_length: int, reference_lengths: Sequence[int]) -> float:
    closest = min(
        reference_lengths, key=lambda length: (abs(length - candidate_length), length)
    )
    if candidate_length > closest:
        return 1.0
    return math.exp(1 - closest / candidate_length)


def bleu4(pred: str, refs: Sequence[str]) -> float:
    """
    Geometric mean of the clipped 1 to 4-gram precisions times the brevity
    penalty, on lowercased whitespace tokens.

    Only orders n >= 2 whose clipped match count is 0 are smoothed, to
    ``1 / (count + 1)`` with ``count`` the candidate n-gram count; every other
    order keeps its plain ``clipped / count``. No unigram match scores 0.
    """
    candidate = normalize_caption(pred)
    references = [normalize_caption(ref) for ref in refs]
    references = [ref for ref in references if ref]
    if not candidate or not references:
        return 0.0

    log_sum = 0.0
    for n in range(1, BLEU_ORDER + 1):
        clipped, total = modified_precision(candidate, references, n)
        if n == 1 and clipped == 0:
            return 0.0
        if clipped == 0:
            precision = 1 / (total + 1)
        else:
            precision = clipped / total
        log_sum += math.log(precision) / BLEU_ORDER
    penalty = brevity_penalty(len(candidate), [len(ref) for ref in references])
    return penalty * math.exp(log_sum)


# Dense captioning


def match_count(
    ious: np.ndarray, bleus: np.ndarray, iou_threshold: float, bleu_threshold: float
) -> int:
    """
    Greedy one-to-one matching by descending IoU, between predictions (rows)
    and ground truths (columns), keeping pairs that pass both thresholds.
    """
    passing = np.argwhere((ious >= iou_threshold) & (bleus >= bleu_threshold))
    order = sorted(
        (tuple(pair) for pair in passing),
        key=lambda pair: (-ious[pair], -bleus[pair], pair),
    )
    used_preds, used_gts = set(), set()
    for pred, gt in order:
        if pred in used_preds or gt in used_gts:
            continue
        used_preds.add(pred)
        used_gts.add(gt)
    return len(used_gts)


def map_lite(
    preds: Sequence[tuple[BBox, str]], gts: Sequence[tuple[BBox, str]]
) -> float:
    """
    Mean over the IoU × BLEU4 threshold grid of the share of ground truths
    matched by a prediction. Without ground truth there is nothing to miss
    and the score is 1.
    """
    if not gts:
        return 1.0
    if not preds:
        return 0.0
    ious = np.array([[p_box.iou(g_box) for g_box, _ in gts] for p_box, _ in preds])
    bleus = np.array(
        [[bleu4(p_text, [g_text]) for _, g_text in gts] for _, p_text in preds]
    )
    cells = [
        match_count(ious, bleus, iou_threshold, bleu_threshold) / len(gts)
        for iou_threshold in IOU_THRESHOLDS
        for bleu_threshold in BLEU_THRESHOLDS
    ]
    return float(np.mean(cells))
