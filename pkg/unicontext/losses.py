from __future__ import annotations

from typing import Sequence, Union

import torch
from torch.nn import functional as F

from unicontext import exceptions
from unicontext.model import MoeStats

Scalar = Union[float, torch.Tensor]


def masked_cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """
    Mean cross-entropy over the positions where ``mask`` is true. ``logits``
    at position t are scored against ``targets`` at position t.
    """
    mask = mask.bool()
    if not bool(mask.any()):
        raise exceptions.EmptySupervision
    return F.cross_entropy(logits[mask], targets[mask], reduction="mean")


def output_loss(
    logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """
    Next-token loss on the supervised target tokens.
    """
    return masked_cross_entropy(logits, targets, loss_mask)


def input_loss(
    logits: torch.Tensor, targets: torch.Tensor, input_mask: torch.Tensor
) -> torch.Tensor:
    """
    Next-token loss on the input image tokens.
    """
    return masked_cross_entropy(logits, targets, input_mask)


def aux_loss(stats: Sequence[MoeStats], num_experts: int) -> torch.Tensor:
    """
    Load-balancing loss ``N · Σ_e f_e · P_e``, averaged over MoE layers. Equals 1
    under uniform routing and N when every token goes to a single expert. A
    model without MoE layers has no balancing loss.
    """
    if not stats:
        return torch.tensor(0.0, dtype=torch.float64)
    per_layer = [
        num_experts * torch.sum(layer.fraction * layer.probability) for layer in stats
    ]
    return torch.stack(per_layer).mean()


def total_loss(
    l_out: Scalar,
    l_aux: Scalar,
    l_in: Scalar = 0.0,
    *,
    lambda_aux: float,
    l_in_weight: float = 0.0,
) -> Scalar:
    total = l_out + lambda_aux * l_aux
    if l_in_weight:
        total = total + l_in_weight * l_in
    return total
