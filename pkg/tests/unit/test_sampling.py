from __future__ import annotations

import pytest
import torch

from unicontext import exceptions, model, sampling, testing


@pytest.fixture
def copier():
    return testing.CopyContextModel(vocab_size=10, max_positions=20, period=2)


def test_greedy__lowest_index_on_ties():
    assert sampling.Greedy().choose(torch.tensor([1.0, 3.0, 3.0])) == 1


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_temperature__invalid(tau):
    with pytest.raises(exceptions.SamplingError):
        sampling.Temperature(tau=tau, seed=0)


def test_temperature__reproducible():
    logits = torch.tensor([0.1, 0.5, 0.2, 0.9])
    first = sampling.Temperature(tau=1.0, seed=4)
    second = sampling.Temperature(tau=1.0, seed=4)

    assert [first.choose(logits) for _ in range(20)] == [
        second.choose(logits) for _ in range(20)
    ]


def test_temperature__low_tau_is_greedy():
    strategy = sampling.Temperature(tau=1e-3, seed=0)

    assert {strategy.choose(torch.tensor([0.0, 5.0, 1.0])) for _ in range(10)} == {1}


@pytest.mark.parametrize("value", [float("nan"), float("inf")])
def test_sample_next__non_finite(value):
    with pytest.raises(exceptions.SamplingError):
        sampling.sample_next(torch.tensor([0.0, value]), sampling.Greedy())


def test_generate__max_new(copier):
    assert sampling.generate(copier, [1, 2], max_new=5, stop=9) == [1, 2, 1, 2, 1]


def test_generate__stops_before_stop_token(copier):
    assert sampling.generate(copier, [1, 2], max_new=5, stop=2) == [1]


def test_generate__nothing_to_do(copier):
    assert sampling.generate(copier, [1, 2], max_new=0, stop=9) == []


def test_generate__too_long(copier):
    with pytest.raises(exceptions.SequenceTooLong):
        sampling.generate(copier, [1] * 18, max_new=3, stop=9)


def test_generate__empty_prefix(copier):
    with pytest.raises(exceptions.PromptError):
        sampling.generate(copier, [], max_new=3, stop=9)


@pytest.mark.parametrize("training", [True, False])
def test_generate__restores_mode(copier, training):
    copier.train(training)

    sampling.generate(copier, [1, 2], max_new=2, stop=9)

    assert copier.training is training


def test_generate__deterministic_with_real_model():
    net = model.build_model(testing.tiny_model_config(30), seed=1)

    first = sampling.generate(net, [1, 2, 3], max_new=8, stop=29)
    second = sampling.generate(net, [1, 2, 3], max_new=8, stop=29)

    assert first == second
    assert all(0 <= token < 30 for token in first)
