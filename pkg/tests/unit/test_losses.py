from __future__ import annotations

import pytest
import torch

from unicontext import exceptions, losses, testing
from unicontext.model import MoeStats


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_masked_cross_entropy__matches_reference(seed):
    generator = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 7, 11, generator=generator, dtype=torch.float64)
    targets = torch.randint(0, 11, (2, 7), generator=generator)
    mask = torch.rand(2, 7, generator=generator) > 0.4
    mask[0, 0] = True

    result = losses.masked_cross_entropy(logits, targets, mask)

    expected = testing.naive_cross_entropy(
        logits.reshape(-1, 11).tolist(),
        targets.reshape(-1).tolist(),
        mask.reshape(-1).tolist(),
    )
    assert float(result) == pytest.approx(expected, rel=1e-12)


def test_masked_cross_entropy__ignores_unmasked_positions():
    logits = torch.zeros(1, 3, 4)
    targets = torch.tensor([[0, 1, 2]])
    mask = torch.tensor([[True, False, True]])
    changed = logits.clone()
    changed[0, 1] = 100.0

    assert torch.equal(
        losses.masked_cross_entropy(logits, targets, mask),
        losses.masked_cross_entropy(changed, targets, mask),
    )


def test_masked_cross_entropy__uniform_logits():
    loss = losses.masked_cross_entropy(
        torch.zeros(1, 2, 8), torch.tensor([[3, 5]]), torch.tensor([[True, True]])
    )

    assert float(loss) == pytest.approx(torch.log(torch.tensor(8.0)).item())


@pytest.mark.parametrize("fn", [losses.output_loss, losses.input_loss])
def test_empty_supervision(fn):
    with pytest.raises(exceptions.EmptySupervision):
        fn(torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2))


def stats(fraction, probability):
    return MoeStats(
        fraction=torch.tensor(fraction, dtype=torch.float64),
        probability=torch.tensor(probability, dtype=torch.float64),
    )


def test_aux_loss__uniform():
    uniform = stats([0.25] * 4, [0.25] * 4)

    assert float(losses.aux_loss([uniform], 4)) == pytest.approx(1.0)


def test_aux_loss__collapse():
    collapsed = stats([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])

    assert float(losses.aux_loss([collapsed], 4)) == pytest.approx(4.0)


def test_aux_loss__mean_over_layers():
    uniform = stats([0.25] * 4, [0.25] * 4)
    collapsed = stats([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])

    assert float(losses.aux_loss([uniform, collapsed], 4)) == pytest.approx(2.5)


def test_aux_loss__no_moe_layer():
    assert float(losses.aux_loss([], 4)) == 0.0


def test_aux_loss__gradient_through_probabilities():
    probability = torch.tensor([0.7, 0.3], dtype=torch.float64, requires_grad=True)
    layer = MoeStats(
        fraction=torch.tensor([0.5, 0.5], dtype=torch.float64),
        probability=probability,
    )

    losses.aux_loss([layer], 2).backward()

    assert probability.grad.tolist() == [1.0, 1.0]


def test_total_loss():
    assert losses.total_loss(2.0, 1.0, lambda_aux=0.02) == pytest.approx(2.02)


def test_total_loss__input_term():
    assert losses.total_loss(
        2.0, 1.0, 3.0, lambda_aux=0.0, l_in_weight=0.5
    ) == pytest.approx(3.5)


def test_total_loss__input_term_off_by_default():
    assert losses.total_loss(2.0, 1.0, 3.0, lambda_aux=0.0) == 2.0
