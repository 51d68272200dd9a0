"""
Reference implementations and fake models used by the test suite.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import attr
import numpy as np
import torch
from torch import nn

from unicontext import metrics, prompts
from unicontext.model import ModelConfig, ModelOutput, MoeLayer


def tiny_model_config(vocab_size: int, **kwargs) -> ModelConfig:
    values = {
        "num_layers": 2,
        "hidden_size": 16,
        "num_heads": 2,
        "max_positions": 64,
        "vocab_size": vocab_size,
        "moe_layer_indices": (1,),
        "num_experts": 4,
        "top_k": 2,
        "ffn_multiplier": 2,
    }
    values.update(kwargs)
    return ModelConfig(**values)


def dense_moe(
    layer: MoeLayer, x: torch.Tensor, segments: torch.Tensor | None = None
) -> torch.Tensor:
    """
    Run every expert on every token and mix them with the gate weights, zeroed
    outside the top-k.
    """
    flat = x.reshape(-1, x.shape[-1])
    flat_segments = segments.reshape(-1) if segments is not None else None
    _, decision = layer.route(flat, flat_segments)
    gates = torch.zeros(flat.shape[0], layer.num_experts, dtype=flat.dtype)
    gates = gates.scatter(1, decision.indices, decision.weights)
    outputs = torch.stack([expert(flat) for expert in layer.experts], dim=1)
    return (gates.unsqueeze(-1) * outputs).sum(dim=1).reshape(x.shape)


def naive_cross_entropy(
    logits: Sequence[Sequence[float]], targets: Sequence[int], mask: Sequence[bool]
) -> float:
    total, count = 0.0, 0
    for row, target, keep in zip(logits, targets, mask):
        if not keep:
            continue
        peak = max(row)
        log_norm = peak + math.log(sum(math.exp(value - peak) for value in row))
        total += log_norm - row[target]
        count += 1
    return total / count


def naive_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = union = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        inter += int(bool(p) and bool(g))
        union += int(bool(p) or bool(g))
    return 1.0 if union == 0 else inter / union


def brute_force_nearest(vectors: np.ndarray, entries: np.ndarray) -> list[int]:
    result = []
    for vector in vectors:
        distances = [float(((vector - entry) ** 2).sum()) for entry in entries]
        result.append(distances.index(min(distances)))
    return result


def naive_bleu4(pred: str, refs: Sequence[str]) -> float:
    candidate = pred.lower().split()
    references = [ref.lower().split() for ref in refs if ref.split()]
    if not candidate or not references:
        return 0.0
    precisions = []
    for n in range(1, 5):
        grams = [tuple(candidate[i : i + n]) for i in range(len(candidate) - n + 1)]
        clipped = 0
        for gram in set(grams):
            most = 0
            for ref in references:
                ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
                most = max(most, ref_grams.count(gram))
            clipped += min(grams.count(gram), most)
        if clipped == 0:
            if n == 1:
                return 0.0
            precisions.append(1 / (len(grams) + 1))
        else:
            precisions.append(clipped / len(grams))
    lengths = sorted(len(ref) for ref in references)
    closest = lengths[0]
    for length in lengths:
        if abs(length - len(candidate)) < abs(closest - len(candidate)):
            closest = length
    penalty = 1.0
    if len(candidate) <= closest:
        penalty = math.exp(1 - closest / len(candidate))
    return penalty * math.prod(precisions) ** 0.25


def naive_map_lite(preds: Sequence[tuple], gts: Sequence[tuple]) -> float:
    """
    Dense captioning score recomputed pair by pair: for every threshold pair,
    repeatedly take the passing pair with the highest IoU among the unused
    predictions and ground truths.
    """
    if not gts:
        return 1.0
    total = 0.0
    for iou_threshold in metrics.IOU_THRESHOLDS:
        for bleu_threshold in metrics.BLEU_THRESHOLDS:
            free_preds = set(range(len(preds)))
            free_gts = set(range(len(gts)))
            matched = 0
            while True:
                best = None
                for p in sorted(free_preds):
                    for g in sorted(free_gts):
                        iou = preds[p][0].iou(gts[g][0])
                        bleu = metrics.bleu4(preds[p][1], [gts[g][1]])
                        if iou < iou_threshold or bleu < bleu_threshold:
                            continue
                        if best is None or (iou, bleu) > best[:2]:
                            best = (iou, bleu, p, g)
                if best is None:
                    break
                free_preds.discard(best[2])
                free_gts.discard(best[3])
                matched += 1
            total += matched / len(gts)
    return total / (len(metrics.IOU_THRESHOLDS) * len(metrics.BLEU_THRESHOLDS))


def finite_difference_gradient(
    loss_fn, parameter: nn.Parameter, index: tuple[int, ...], eps: float = 1e-6
) -> float:
    with torch.no_grad():
        original = parameter[index].item()
        parameter[index] = original + eps
        plus = float(loss_fn())
        parameter[index] = original - eps
        minus = float(loss_fn())
        parameter[index] = original
    return (plus - minus) / (2 * eps)


class CopyContextModel(nn.Module):
    """
    Predicts, at every position, the token found ``period`` positions before the
    next one. With segmentation prompts and ``period`` the length of a pair, it
    copies the mask of the previous in-context sample.
    """

    def __init__(self, vocab_size: int, max_positions: int, period: int):
        super().__init__()
        self.config = ModelConfig(
            num_layers=1,
            hidden_size=1,
            num_heads=1,
            vocab_size=vocab_size,
            max_positions=max_positions,
            moe_layer_indices=(),
        )
        self.period = period

    def forward(self, ids: torch.Tensor, token_mask=None) -> ModelOutput:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        batch, length = ids.shape
        logits = torch.zeros(batch, length, self.config.vocab_size)
        for position in range(length):
            source = position + 1 - self.period
            if source >= 0:
                logits[torch.arange(batch), position, ids[:, source]] = 10.0
        return ModelOutput(logits=logits, moe_stats=[], decisions=[])


class RandomTokenModel(nn.Module):
    """
    Scores drawn from a normal distribution, reproducible for a given seed and
    sequence length.
    """

    def __init__(self, vocab_size: int, max_positions: int, seed: int = 0):
        super().__init__()
        self.config = ModelConfig(
            num_layers=1,
            hidden_size=1,
            num_heads=1,
            vocab_size=vocab_size,
            max_positions=max_positions,
            moe_layer_indices=(),
        )
        self.seed = seed

    def forward(self, ids: torch.Tensor, token_mask=None) -> ModelOutput:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        generator = torch.Generator().manual_seed(self.seed * 100_003 + ids.shape[-1])
        logits = torch.randn(
            *ids.shape, self.config.vocab_size, generator=generator
        )
        return ModelOutput(logits=logits, moe_stats=[], decisions=[])


@attr.dataclass(kw_only=True)
class FixedBatches:
    """
    Batch source cycling over a fixed list of batches.
    """

    batches: Sequence[prompts.Batch]
    served: int = 0

    def next_batch(self) -> prompts.Batch:
        batch = self.batches[self.served % len(self.batches)]
        self.served += 1
        return batch


def batches_of(
    task: str, sequences: Iterable[prompts.PromptSequence], size: int, pad_id: int
) -> list[prompts.Batch]:
    sequences = list(sequences)
    return [
        prompts.collate(task, sequences[start : start + size], pad_id)
        for start in range(0, len(sequences), size)
    ]
