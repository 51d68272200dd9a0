from __future__ import annotations

import numpy as np
import pytest
import torch

from unicontext import exceptions, losses, model, testing
from unicontext.vocab import build_vocabulary


def moe_config(**kwargs):
    values = {"hidden_size": 8, "num_heads": 2, "vocab_size": 40, "dtype": "float64"}
    values.update(kwargs)
    return testing.tiny_model_config(**values)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"hidden_size": 10, "num_heads": 4}, "divisible"),
        ({"top_k": 3, "num_experts": 2}, "top_k"),
        ({"top_k": 0}, "top_k"),
        ({"moe_layer_indices": (2,)}, "outside"),
        ({"moe_layer_indices": (1, 1)}, "duplicates"),
        ({"layer_norm_epsilon": 0.0}, "epsilon"),
        ({"dropout": 1.0}, "dropout"),
        ({"routing_input": "expert"}, "routing_input"),
        ({"dtype": "float16"}, "dtype"),
    ],
)
def test_model_config__invalid(kwargs, match):
    with pytest.raises(exceptions.ModelConfigError, match=match):
        testing.tiny_model_config(40, **kwargs)


def test_model_config__is_a_value_error():
    with pytest.raises(ValueError):
        model.ModelConfig(num_layers=0)


def test_moe_every():
    assert model.moe_every(12) == (1, 3, 5, 7, 9, 11)
    assert model.moe_every(1) == ()


def test_decoder_model__needs_vocab_size():
    with pytest.raises(exceptions.ModelConfigError, match="vocab_size"):
        model.DecoderModel(model.ModelConfig())


def test_decoder_model__segment_table_size():
    with pytest.raises(exceptions.ModelConfigError, match="Segment table"):
        model.DecoderModel(testing.tiny_model_config(40), segment_table=[0] * 39)


@pytest.mark.parametrize("num_experts", [2, 4, 8])
@pytest.mark.parametrize("top_k", [1, 2])
def test_moe_layer__sparse_matches_dense(num_experts, top_k):
    config = moe_config(num_experts=num_experts, top_k=top_k)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(num_experts * 10 + top_k)
        layer = model.MoeLayer(config).double()
        x = torch.randn(3, 7, config.hidden_size, dtype=torch.float64)

    sparse, _, _ = layer(x)
    dense = testing.dense_moe(layer, x)

    scale = dense.abs().max()
    assert ((sparse - dense).abs().max() / scale).item() <= 1e-10


def test_moe_layer__single_expert_is_plain_ffn():
    config = moe_config(num_experts=1, top_k=1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        layer = model.MoeLayer(config).double()
        x = torch.randn(10, config.hidden_size, dtype=torch.float64)

    output, _, decision = layer(x)

    assert torch.equal(decision.weights, torch.ones(10, 1, dtype=torch.float64))
    assert torch.equal(output, layer.experts[0](x))


def test_moe_layer__gate_decision():
    config = moe_config(num_experts=8, top_k=2)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(1)
        layer = model.MoeLayer(config).double()
        x = torch.randn(50, config.hidden_size, dtype=torch.float64)

    probabilities, decision = layer.route(x)

    assert decision.indices.shape == (50, 2)
    assert (decision.indices[:, 0] != decision.indices[:, 1]).all()
    assert (decision.weights[:, 0] >= decision.weights[:, 1]).all()
    assert ((decision.weights > 0) & (decision.weights < 1)).all()
    assert (decision.weights.sum(dim=-1) <= 1).all()
    assert torch.equal(decision.weights, probabilities.gather(1, decision.indices))


def test_moe_layer__renormalized_gates():
    config = moe_config(num_experts=4, top_k=2, renormalize_gates=True)
    layer = model.MoeLayer(config).double()

    _, decision = layer.route(torch.randn(20, config.hidden_size, dtype=torch.float64))

    assert torch.allclose(
        decision.weights.sum(dim=-1), torch.ones(20, dtype=torch.float64)
    )


def test_moe_layer__segment_routing_needs_segments():
    layer = model.MoeLayer(moe_config(routing_input="token+segment")).double()

    with pytest.raises(exceptions.ModelConfigError, match="Segment"):
        layer.route(torch.zeros(2, 8, dtype=torch.float64))


def test_moe_layer__segment_routing():
    layer = model.MoeLayer(moe_config(routing_input="token+segment")).double()
    x = torch.zeros(2, 8, dtype=torch.float64)

    probabilities, _ = layer.route(x, torch.tensor([0, 1]))

    # Identical states in different segments route differently
    assert not torch.equal(probabilities[0], probabilities[1])


def test_load_statistics():
    probabilities = torch.tensor([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    indices = torch.tensor([[0, 1], [2, 0]])

    stats = model.load_statistics(probabilities, indices, 3)

    assert stats.fraction.tolist() == [0.5, 0.25, 0.25]
    assert torch.allclose(stats.probability, torch.tensor([0.3, 0.2, 0.5]))


def test_load_statistics__token_mask():
    probabilities = torch.tensor([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    indices = torch.tensor([[0, 1], [2, 0]])

    stats = model.load_statistics(
        probabilities, indices, 3, torch.tensor([True, False])
    )

    assert stats.fraction.tolist() == [0.5, 0.5, 0.0]
    assert not stats.fraction.requires_grad


@pytest.fixture
def tiny():
    config = moe_config(hidden_size=16, num_heads=2, max_positions=32)
    return model.build_model(config, seed=0)


def test_build_model__deterministic():
    config = moe_config()
    first = model.build_model(config, seed=3)
    second = model.build_model(config, seed=3)

    for a, b in zip(first.state_dict().values(), second.state_dict().values()):
        assert torch.equal(a, b)


def test_build_model__leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)

    model.build_model(moe_config(), seed=3)

    assert torch.equal(torch.rand(1), expected)


def test_build_model__logs(caplog, action_records):
    caplog.set_level("INFO")

    model.build_model(moe_config(), seed=0)

    records = action_records("build_model")
    assert records[0].moe_layers == [1]


def test_forward__shapes(tiny):
    ids = torch.randint(0, 40, (2, 9))

    output = tiny(ids)

    assert output.logits.shape == (2, 9, 40)
    assert len(output.moe_stats) == len(output.decisions) == 1
    assert output.decisions[0].indices.shape == (18, 2)


def test_forward__unbatched(tiny):
    ids = torch.randint(0, 40, (9,))

    assert torch.equal(tiny(ids).logits[0], tiny(ids[None]).logits[0])


def test_forward__dense_baseline():
    dense = model.build_model(moe_config(moe_layer_indices=()), seed=0)

    output = dense(torch.zeros(1, 3, dtype=torch.long))

    assert output.moe_stats == []
    assert not dense.moe_layers


def test_forward__too_long(tiny):
    with pytest.raises(exceptions.SequenceTooLong):
        tiny(torch.zeros(1, 33, dtype=torch.long))


@pytest.mark.parametrize("token", [-1, 40])
def test_forward__token_out_of_range(tiny, token):
    with pytest.raises(exceptions.TokenOutOfRange):
        tiny(torch.tensor([[0, token]]))


def test_forward__token_mask_excludes_padding(tiny):
    ids = torch.randint(0, 40, (1, 6))
    mask = torch.tensor([[True, True, True, False, False, False]])

    masked = tiny(ids, token_mask=mask).moe_stats[0]
    prefix = tiny(ids[:, :3]).moe_stats[0]

    assert torch.allclose(masked.fraction, prefix.fraction)
    assert torch.allclose(masked.probability, prefix.probability)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_forward__causal(dtype):
    config = moe_config(hidden_size=16, num_heads=2, max_positions=64, dtype=dtype)
    built = model.build_model(config, seed=0).eval()
    generator = torch.Generator().manual_seed(0)
    for _ in range(100):
        length = int(torch.randint(2, 65, (1,), generator=generator))
        cut = int(torch.randint(1, length, (1,), generator=generator))
        ids = torch.randint(0, 40, (1, length), generator=generator)
        changed = ids.clone()
        changed[0, cut:] = torch.randint(0, 40, (length - cut,), generator=generator)

        with torch.no_grad():
            before = built(ids).logits[0, :cut]
            after = built(changed).logits[0, :cut]

        assert torch.equal(before, after)


def test_forward__causal_every_position(tiny):
    tiny.eval()
    generator = torch.Generator().manual_seed(1)
    ids = torch.randint(0, 40, (2, 24), generator=generator)
    with torch.no_grad():
        reference = tiny(ids).logits
        for cut in range(1, 24):
            changed = ids.clone()
            changed[:, cut:] = torch.randint(0, 40, (2, 24 - cut), generator=generator)

            assert torch.equal(tiny(changed).logits[:, :cut], reference[:, :cut])


def test_moe_layer__token_output_ignores_other_tokens():
    config = moe_config(num_experts=8, top_k=2)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(5)
        layer = model.MoeLayer(config).double()
        x = torch.randn(40, config.hidden_size, dtype=torch.float64)
        changed = x.clone()
        changed[10:] = torch.randn(30, config.hidden_size, dtype=torch.float64)

    with torch.no_grad():
        before, _, _ = layer(x)
        after, _, _ = layer(changed)

    assert torch.equal(before[:10], after[:10])


def test_segment_table_buffer():
    v = build_vocabulary(text_size=3, image_code_count=2, bin_count=2)
    config = testing.tiny_model_config(v.total_size, routing_input="token+segment")

    built = model.build_model(config, seed=0, segment_table=v.segment_table())

    assert built.segment_table.tolist() == v.segment_table()
    assert built(torch.arange(v.total_size)).logits.shape[1] == v.total_size


def test_gradients_match_finite_differences():
    config = testing.tiny_model_config(
        40, hidden_size=16, num_heads=2, max_positions=16, dtype="float64"
    )
    net = model.build_model(config, seed=5)
    generator = torch.Generator().manual_seed(1)
    ids = torch.randint(0, 40, (2, 10), generator=generator)
    mask = torch.rand(2, 9, generator=generator) > 0.3

    def loss_fn():
        output = net(ids[:, :-1])
        l_out = losses.output_loss(output.logits, ids[:, 1:], mask)
        l_aux = losses.aux_loss(output.moe_stats, config.num_experts)
        return losses.total_loss(l_out, l_aux, lambda_aux=0.02)

    net.zero_grad()
    loss_fn().backward()

    errors = []
    with torch.no_grad():
        for name, parameter in net.named_parameters():
            grad = parameter.grad
            if grad is None or not bool(grad.abs().max() > 1e-4):
                continue
            flat_index = int(grad.abs().argmax())
            index = tuple(int(i) for i in np.unravel_index(flat_index, grad.shape))
            analytic = float(grad[index])
            numeric = testing.finite_difference_gradient(loss_fn, parameter, index)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))

    assert len(errors) > 10
    assert max(errors) < 1e-4
