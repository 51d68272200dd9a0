"""
Decoder-only transformer with sparse mixture-of-experts feed-forward layers.

Blocks are pre-norm::

    x = x + attention(layer_norm(x))
    x = x + ffn_or_moe(layer_norm(x))

A MoE layer routes every token to ``top_k`` of ``num_experts`` feed-forward
experts through ``softmax(W_g x)``; the selected softmax values weight the
expert outputs and only the selected experts run on a token.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import attr
import torch
from torch import nn
from torch.nn import functional as F

from unicontext import exceptions
from unicontext.vocab import Segment

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
ROUTING_INPUTS = ("token", "token+segment")
SEGMENT_KINDS = len(Segment)
INIT_STD = 0.02


def moe_every(num_layers: int) -> tuple[int, ...]:
    """
    MoE placement on every second layer (1, 3, 5, ...).
    """
    return tuple(range(1, num_layers, 2))


@attr.dataclass(frozen=True, kw_only=True)
class ModelConfig:
    """
    Attributes
    ----------
    num_layers :
        Number of transformer blocks.
    hidden_size :
        Width D of the residual stream.
    num_heads :
        Attention heads, must divide ``hidden_size``.
    max_positions :
        Longest sequence the position table covers.
    vocab_size :
        Number of token ids. 0 until it is taken from the vocabulary.
    moe_layer_indices :
        Blocks whose feed-forward is a MoE layer. Empty gives a dense model.
    num_experts :
        Experts per MoE layer.
    top_k :
        Experts activated per token.
    ffn_multiplier :
        Inner width of a feed-forward, as a multiple of ``hidden_size``.
    layer_norm_epsilon :
        Epsilon of every layer norm.
    dropout :
        Dropout on attention probabilities and residual branches.
    renormalize_gates :
        Rescale the selected gate weights to sum to 1.
    routing_input :
        ``token`` routes on the hidden state, ``token+segment`` also feeds the
        one-hot segment kind of the token to the router.
    dtype :
        ``float32`` or ``float64``.
    """

    num_layers: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    max_positions: int = 1024
    vocab_size: int = 0
    moe_layer_indices: tuple[int, ...] = (1, 3)
    num_experts: int = 4
    top_k: int = 2
    ffn_multiplier: int = 4
    layer_norm_epsilon: float = 1e-12
    dropout: float = 0.0
    renormalize_gates: bool = False
    routing_input: str = "token"
    dtype: str = "float32"

    def __attrs_post_init__(self):
        if self.num_layers < 1 or self.hidden_size < 1 or self.num_heads < 1:
            raise exceptions.ModelConfigError(
                "num_layers, hidden_size and num_heads must be positive"
            )
        if self.hidden_size % self.num_heads:
            raise exceptions.ModelConfigError(
                f"hidden_size={self.hidden_size} is not divisible by "
                f"num_heads={self.num_heads}"
            )
        if not 1 <= self.top_k <= self.num_experts:
            raise exceptions.ModelConfigError(
                f"top_k={self.top_k} must be between 1 and "
                f"num_experts={self.num_experts}"
            )
        if any(not 0 <= i < self.num_layers for i in self.moe_layer_indices):
            raise exceptions.ModelConfigError(
                f"moe_layer_indices {self.moe_layer_indices} outside "
                f"[0, {self.num_layers})"
            )
        if len(set(self.moe_layer_indices)) != len(self.moe_layer_indices):
            raise exceptions.ModelConfigError("moe_layer_indices has duplicates")
        if self.layer_norm_epsilon <= 0:
            raise exceptions.ModelConfigError("layer_norm_epsilon must be > 0")
        if not 0 <= self.dropout < 1:
            raise exceptions.ModelConfigError("dropout must be in [0, 1)")
        if self.max_positions < 1 or self.vocab_size < 0 or self.ffn_multiplier < 1:
            raise exceptions.ModelConfigError(
                "max_positions and ffn_multiplier must be positive"
            )
        if self.routing_input not in ROUTING_INPUTS:
            raise exceptions.ModelConfigError(
                f"routing_input must be one of {', '.join(ROUTING_INPUTS)}"
            )
        if self.dtype not in DTYPES:
            raise exceptions.ModelConfigError(
                f"dtype must be one of {', '.join(DTYPES)}"
            )

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class GateDecision:
    """
    Routing of the tokens of one MoE layer, tokens flattened in (batch, position)
    order. ``indices`` and ``weights`` are (tokens, top_k), weights descending.
    """

    indices: torch.Tensor
    weights: torch.Tensor


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class MoeStats:
    """
    Per-expert load of one MoE layer over the routed tokens.

    Attributes
    ----------
    fraction :
        f_e, share of (token, slot) assignments sent to each expert. Not
        differentiable.
    probability :
        P_e, mean router probability of each expert. Differentiable.
    """

    fraction: torch.Tensor
    probability: torch.Tensor


@attr.dataclass(frozen=True, kw_only=True, eq=False)
class ModelOutput:
    logits: torch.Tensor
    moe_stats: list[MoeStats]
    decisions: list[GateDecision]


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        inner = config.hidden_size * config.ffn_multiplier
        self.fc_in = nn.Linear(config.hidden_size, inner)
        self.fc_out = nn.Linear(inner, config.hidden_size)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.fc_out(F.gelu(self.fc_in(x))))


class MoeLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_experts = config.num_experts
        self.top_k = config.top_k
        self.renormalize = config.renormalize_gates
        self.use_segments = config.routing_input == "token+segment"
        router_inputs = config.hidden_size + (
            SEGMENT_KINDS if self.use_segments else 0
        )
        self.router = nn.Linear(router_inputs, config.num_experts, bias=False)
        self.experts = nn.ModuleList(
            FeedForward(config) for _ in range(config.num_experts)
        )

    def route(
        self, x: torch.Tensor, segments: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, GateDecision]:
        """
        Router probabilities (tokens, num_experts) and top-k decision for
        flattened token states.
        """
        router_input = x
        if self.use_segments:
            if segments is None:
                raise exceptions.ModelConfigError(
                    "Segment routing needs the segment kind of every token"
                )
            one_hot = F.one_hot(segments, SEGMENT_KINDS).to(x.dtype)
            router_input = torch.cat([x, one_hot], dim=-1)
        probabilities = torch.softmax(self.router(router_input), dim=-1)
        weights, indices = probabilities.topk(self.top_k, dim=-1)
        if self.renormalize:
            weights = weights / weights.sum(dim=-1, keepdim=True)
        return probabilities, GateDecision(indices=indices, weights=weights)

    def forward(
        self,
        x: torch.Tensor,
        segments: torch.Tensor | None = None,
        token_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, MoeStats, GateDecision]:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        flat_segments = segments.reshape(-1) if segments is not None else None
        probabilities, decision = self.route(flat, flat_segments)

        # Every expert sees the whole, fixed-shape batch and unselected experts
        # get a zero gate: a token's output never depends on how others route.
        gates = torch.zeros_like(probabilities).scatter(
            1, decision.indices, decision.weights
        )
        output = torch.zeros_like(flat)
        for expert_index, expert in enumerate(self.experts):
            output = output + expert(flat) * gates[:, expert_index, None]

        stats = load_statistics(
            probabilities,
            decision.indices,
            self.num_experts,
            token_mask.reshape(-1) if token_mask is not None else None,
        )
        return output.reshape(shape), stats, decision


def load_statistics(
    probabilities: torch.Tensor,
    indices: torch.Tensor,
    num_experts: int,
    token_mask: torch.Tensor | None = None,
) -> MoeStats:
    if token_mask is not None:
        probabilities = probabilities[token_mask]
        indices = indices[token_mask]
    counts = torch.bincount(indices.reshape(-1), minlength=num_experts)
    total = max(indices.numel(), 1)
    return MoeStats(
        fraction=(counts.to(probabilities.dtype) / total).detach(),
        probability=probabilities.mean(dim=0),
    )


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.head_size = config.head_size
        self.qkv = nn.Linear(config.hidden_size, 3 * config.hidden_size)
        self.proj = nn.Linear(config.hidden_size, config.hidden_size)
        self.attn_dropout = nn.Dropout(config.dropout)
        self.resid_dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, hidden = x.shape
        q, k, v = self.qkv(x).split(hidden, dim=-1)
        q, k, v = (
            t.view(batch, length, self.num_heads, self.head_size).transpose(1, 2)
            for t in (q, k, v)
        )
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_size)
        future = torch.ones(length, length, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        attention = self.attn_dropout(torch.softmax(scores, dim=-1))
        y = (attention @ v).transpose(1, 2).reshape(batch, length, hidden)
        return self.resid_dropout(self.proj(y))


class Block(nn.Module):
    def __init__(self, config: ModelConfig, moe: bool):
        super().__init__()
        eps = config.layer_norm_epsilon
        self.ln_1 = nn.LayerNorm(config.hidden_size, eps=eps)
        self.attention = CausalSelfAttention(config)
        self.ln_2 = nn.LayerNorm(config.hidden_size, eps=eps)
        self.ffn: FeedForward | MoeLayer = (
            MoeLayer(config) if moe else FeedForward(config)
        )

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoeLayer)

    def forward(
        self,
        x: torch.Tensor,
        segments: torch.Tensor | None = None,
        token_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, MoeStats | None, GateDecision | None]:
        x = x + self.attention(self.ln_1(x))
        if isinstance(self.ffn, MoeLayer):
            y, stats, decision = self.ffn(self.ln_2(x), segments, token_mask)
            return x + y, stats, decision
        return x + self.ffn(self.ln_2(x)), None, None


class DecoderModel(nn.Module):
    """
    Parameters
    ----------
    config :
        Model hyperparameters, ``vocab_size`` included.
    segment_table :
        Segment kind index of every token id, used by segment-aware routing.
    """

    def __init__(self, config: ModelConfig, segment_table: Sequence[int] | None = None):
        super().__init__()
        if config.vocab_size < 1:
            raise exceptions.ModelConfigError("vocab_size must be set before building")
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_size)
        self.position_embedding = nn.Embedding(
            config.max_positions, config.hidden_size
        )
        self.dropout = nn.Dropout(config.dropout)
        moe_layers = set(config.moe_layer_indices)
        self.blocks = nn.ModuleList(
            Block(config, moe=index in moe_layers) for index in range(config.num_layers)
        )
        self.ln_f = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_epsilon)
        self.head = nn.Linear(config.hidden_size, config.vocab_size, bias=False)

        table = torch.zeros(config.vocab_size, dtype=torch.long)
        if segment_table is not None:
            if len(segment_table) != config.vocab_size:
                raise exceptions.ModelConfigError(
                    f"Segment table covers {len(segment_table)} tokens, "
                    f"vocab_size is {config.vocab_size}"
                )
            table = torch.as_tensor(list(segment_table), dtype=torch.long)
        self.register_buffer("segment_table", table)

        self.apply(self._init_weights)
        self.to(config.torch_dtype)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    @property
    def moe_layers(self) -> list[MoeLayer]:
        return [block.ffn for block in self.blocks if isinstance(block.ffn, MoeLayer)]

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """
        Token embedding plus learned absolute position embedding, for a
        (batch, length) tensor of ids.
        """
        length = ids.shape[-1]
        if length > self.config.max_positions:
            raise exceptions.SequenceTooLong(
                length=length, limit=self.config.max_positions
            )
        if ids.numel() and (
            int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size
        ):
            raise exceptions.TokenOutOfRange(
                f"Token ids must be in [0, {self.config.vocab_size})"
            )
        positions = torch.arange(length, device=ids.device)
        return self.token_embedding(ids) + self.position_embedding(positions)

    def forward(
        self, ids: torch.Tensor, token_mask: torch.Tensor | None = None
    ) -> ModelOutput:
        """
        Parameters
        ----------
        ids :
            (batch, length) or (length,) token ids.
        token_mask :
            Tokens counted in the routing statistics (padding excluded).
        """
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
            if token_mask is not None:
                token_mask = token_mask.unsqueeze(0)
        x = self.dropout(self.embed(ids))
        segments = self.segment_table[ids]

        stats, decisions = [], []
        for block in self.blocks:
            x, layer_stats, decision = block(x, segments, token_mask)
            if layer_stats is not None and decision is not None:
                stats.append(layer_stats)
                decisions.append(decision)
        logits = self.head(self.ln_f(x))
        return ModelOutput(logits=logits, moe_stats=stats, decisions=decisions)


def build_model(
    config: ModelConfig, *, seed: int, segment_table: Sequence[int] | None = None
) -> DecoderModel:
    """
    Build a model with weights drawn from ``seed``, without touching the
    global torch random state.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DecoderModel(config, segment_table=segment_table)
    parameters = sum(p.numel() for p in model.parameters())
    logger.info(
        f"Built model with {parameters} parameters",
        extra={
            "action": "build_model",
            "parameters": parameters,
            "moe_layers": list(config.moe_layer_indices),
            "num_experts": config.num_experts,
            "top_k": config.top_k,
        },
    )
    return model
