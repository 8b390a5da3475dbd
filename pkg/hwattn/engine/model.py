"""
Decoder-only transformer with grouped-query attention, rotary positions and an
arbitrary additive attention mask per forward call.

Blocks are pre-norm residual (LayerNorm -> attention, LayerNorm -> GELU MLP)
with an untied output head and no biases in the projections.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from hwattn.engine.numerics import Rng, ShapeError, masked_softmax, matmul
from hwattn.run import Global as gl
from hwattn.run.exceptions import ConfigError

if TYPE_CHECKING:
    from hwattn.engine.kvcache import HybridKVCache
    from hwattn.engine.masking import AdditiveMask


class PositionOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters shared by the engine and the cost model.
    GQA when n_kv_heads < n_q_heads, MHA when they are equal.
    """

    n_layers: int = 4
    d_model: int = 128
    n_q_heads: int = 8
    n_kv_heads: int = 2
    d_ff: int = 512
    vocab_size: int = 256
    max_position: int = 8192
    rope_theta: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def kv_group(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def attention_kind(self) -> str:
        return "MHA" if self.n_kv_heads == self.n_q_heads else "GQA"

    def validate(self) -> ModelConfig:
        """
        This method checks the config invariants

        Raises:
            ConfigError: names the first offending field

        Returns:
            ModelConfig: self, for chaining
        """
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "rope_theta":
                if not value > 0:
                    raise ConfigError(f.name, f"must be > 0, got {value}")
            elif isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f.name, f"must be an integer >= 1, got {value!r}")
        if self.d_model % self.n_q_heads:
            raise ConfigError("d_model", f"{self.d_model} is not divisible by n_q_heads={self.n_q_heads}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError("n_kv_heads", f"{self.n_kv_heads} does not divide n_q_heads={self.n_q_heads}")
        if self.head_dim % 2:
            raise ConfigError("d_model", f"head_dim={self.head_dim} must be even for rotary encoding")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, config_dict: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        for key in config_dict:
            if key not in known:
                raise ConfigError(key, "unknown model key")
        return cls(**config_dict).validate()


@dataclass(frozen=True)
class SequenceLayout:
    """
    Split of a sequence into the conditioning prefix and the generated tokens
    """

    prefix_len: int
    gen_len: int = 0

    def __post_init__(self) -> None:
        if self.prefix_len < 1:
            raise ValueError(f"prefix_len must be >= 1, got {self.prefix_len}")
        if self.gen_len < 0:
            raise ValueError(f"gen_len must be >= 0, got {self.gen_len}")

    @property
    def total(self) -> int:
        return self.prefix_len + self.gen_len


@dataclass
class ForwardOutput:
    """
    logits: (positions, vocab), or (batch, positions, vocab) for batched input.
    attention_weights: one (heads, queries, keys) tensor per layer when captured.
    kv: per-layer post-rotary (keys, values), each (kv_heads, positions, head_dim), when captured.
    """

    logits: torch.Tensor
    attention_weights: Optional[List[torch.Tensor]] = None
    kv: Optional[List[Tuple[torch.Tensor, torch.Tensor]]] = None


def rotary_tables(
    head_dim: int, max_position: int, theta: float = 10000.0
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    This function builds cosine/sine tables for rotary position encoding.
    Angles are computed in float64 so large absolute positions keep their precision.

    Args:
        head_dim (int): per-head dimension, even
        max_position (int): number of positions to tabulate
        theta (float, optional): frequency base. Defaults to 10000.0.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: cos and sin, each (max_position, head_dim // 2)
    """
    inv_freq = 1.0 / theta ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.outer(torch.arange(max_position, dtype=torch.float64), inv_freq)
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


class GroupedQueryAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.n_q_heads = config.n_q_heads
        self.n_kv_heads = config.n_kv_heads
        self.head_dim = config.head_dim
        self.group = config.kv_group
        self.scale = 1.0 / math.sqrt(config.head_dim)
        self.q_proj = nn.Linear(config.d_model, config.n_q_heads * config.head_dim, bias=False)
        self.k_proj = nn.Linear(config.d_model, config.n_kv_heads * config.head_dim, bias=False)
        self.v_proj = nn.Linear(config.d_model, config.n_kv_heads * config.head_dim, bias=False)
        self.o_proj = nn.Linear(config.n_q_heads * config.head_dim, config.d_model, bias=False)

    def _split_heads(self, x: torch.Tensor, n_heads: int) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, n_heads, self.head_dim).transpose(1, 2)

    def _merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, _, length, _ = x.shape
        return x.transpose(1, 2).reshape(batch, length, self.n_q_heads * self.head_dim)

    def project_kv(
        self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        k = apply_rotary(self._split_heads(self.k_proj(x), self.n_kv_heads), cos, sin)
        v = self._split_heads(self.v_proj(x), self.n_kv_heads)
        return k, v

    def attend(
        self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        # each kv head serves `group` consecutive query heads
        k = k.repeat_interleave(self.group, dim=-3)
        v = v.repeat_interleave(self.group, dim=-3)
        scores = matmul(q, k.transpose(-1, -2)) * self.scale
        weights = masked_softmax(scores, mask.expand_as(scores))
        return weights @ v, weights

    def forward(
        self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        q = apply_rotary(self._split_heads(self.q_proj(x), self.n_q_heads), cos, sin)
        k, v = self.project_kv(x, cos, sin)
        out, weights = self.attend(q, k, v, mask)
        return self.o_proj(self._merge_heads(out)), weights, (k, v)

    def decode(
        self,
        x: torch.Tensor,
        cos: torch.Tensor,
        sin: torch.Tensor,
        past_k: torch.Tensor,
        past_v: torch.Tensor,
    ) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        """
        This method attends one new token over cached keys/values plus itself

        Args:
            x (torch.Tensor): normalized hidden state, (1, 1, d_model)
            cos (torch.Tensor): rotary cos for the token's absolute position
            sin (torch.Tensor): rotary sin for the token's absolute position
            past_k (torch.Tensor): visible cached keys, (kv_heads, S, head_dim)
            past_v (torch.Tensor): visible cached values, (kv_heads, S, head_dim)

        Returns:
            Tuple: attention output (1, 1, d_model) and the new (key, value), each (kv_heads, head_dim)
        """
        q = apply_rotary(self._split_heads(self.q_proj(x), self.n_q_heads), cos, sin)
        k_new, v_new = self.project_kv(x, cos, sin)
        k = torch.cat((past_k.unsqueeze(0), k_new), dim=2)
        v = torch.cat((past_v.unsqueeze(0), v_new), dim=2)
        mask = torch.zeros((1, 1, 1, k.shape[2]), dtype=q.dtype)
        out, _ = self.attend(q, k, v, mask)
        return self.o_proj(self._merge_heads(out)), (k_new[0, :, 0], v_new[0, :, 0])


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(config.d_model)
        self.attn = GroupedQueryAttention(config)
        self.ff_norm = nn.LayerNorm(config.d_model)
        self.fc1 = nn.Linear(config.d_model, config.d_ff, bias=False)
        self.fc2 = nn.Linear(config.d_ff, config.d_model, bias=False)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(self.ff_norm(x))))

    def forward(self, x, cos, sin, mask):
        h, weights, kv = self.attn(self.attn_norm(x), cos, sin, mask)
        x = x + h
        return x + self.feed_forward(x), weights, kv

    def decode(self, x, cos, sin, past_k, past_v):
        h, kv = self.attn.decode(self.attn_norm(x), cos, sin, past_k, past_v)
        x = x + h
        return x + self.feed_forward(x), kv


class DecoderModel(nn.Module):
    """
    Decoder-only transformer. Weights are fixed after init_model; forward takes
    the attention mask explicitly so the same weights serve the full-attention
    teacher and the windowed student.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config.validate()
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(config) for _ in range(config.n_layers))
        self.norm_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        cos, sin = rotary_tables(config.head_dim, config.max_position, config.rope_theta)
        self.register_buffer("rope_cos", cos.float(), persistent=False)
        self.register_buffer("rope_sin", sin.float(), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def _check_positions(self, positions: torch.Tensor) -> None:
        if positions.numel() and int(positions.max()) >= self.config.max_position:
            raise PositionOverflowError(
                f"position {int(positions.max())} exceeds max_position={self.config.max_position}"
            )

    def forward(
        self,
        tokens: torch.Tensor,
        mask: Union[AdditiveMask, torch.Tensor],
        capture_attention: bool = False,
        positions: Optional[torch.Tensor] = None,
        capture_kv: bool = False,
    ) -> ForwardOutput:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        unbatched = tokens.dim() == 1
        if unbatched:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if positions is None:
            positions = torch.arange(length)
        positions = torch.as_tensor(positions, dtype=torch.long)
        if positions.shape != (length,):
            raise ShapeError("forward positions", positions.shape, (length,))
        self._check_positions(positions)
        entries = mask.entries if hasattr(mask, "entries") else mask
        if tuple(entries.shape[-2:]) != (length, length):
            raise ShapeError("forward mask", entries.shape, (length, length))
        entries = entries.to(self.dtype)

        cos, sin = self.rope_cos[positions], self.rope_sin[positions]
        x = self.embed(tokens)
        captured_weights, captured_kv = [], []
        for block in self.blocks:
            x, weights, kv = block(x, cos, sin, entries)
            if capture_attention:
                weights = weights.detach()
                captured_weights.append(weights[0] if unbatched else weights)
            if capture_kv:
                k, v = (t.detach() for t in kv)
                captured_kv.append((k[0], v[0]) if unbatched else (k, v))
        logits = self.lm_head(self.norm_f(x))
        return ForwardOutput(
            logits=logits[0] if unbatched else logits,
            attention_weights=captured_weights if capture_attention else None,
            kv=captured_kv if capture_kv else None,
        )

    @torch.no_grad()
    def decode_step(self, cache: HybridKVCache, new_token: int) -> torch.Tensor:
        cache.check_compatible(self.config)
        new_token = int(new_token)
        if not 0 <= new_token < self.config.vocab_size:
            raise ValueError(f"token {new_token} outside vocab of size {self.config.vocab_size}")
        position = torch.tensor([cache.next_position])
        self._check_positions(position)
        cos, sin = self.rope_cos[position], self.rope_sin[position]
        x = self.embed(torch.tensor([[new_token]]))
        entries = []
        for layer, block in enumerate(self.blocks):
            past_k, past_v = cache.visible_kv(layer)
            x, kv = block.decode(x, cos, sin, past_k, past_v)
            entries.append(kv)
        cache.append(entries)
        return self.lm_head(self.norm_f(x))[0, 0]


def init_model(config: ModelConfig, rng: Rng) -> DecoderModel:
    """
    This function builds a model and draws its weights from rng.
    Linear and embedding weights ~ N(0, 0.02); attention output and second MLP
    projections are further scaled by 1/sqrt(2 * n_layers); LayerNorm weights are 1 and biases 0.
    Parameters are visited in declaration order, so (config, seed) fixes every weight bit.

    Args:
        config (ModelConfig): architecture
        rng (Rng): random stream; only its "init" child is consumed

    Returns:
        DecoderModel: initialized model in float32
    """
    model = DecoderModel(config)
    init_rng = rng.child("init")
    residual_std = gl.INIT_STD / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if "norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith(("o_proj.weight", "fc2.weight")):
                param.copy_(init_rng.normal(param.shape, residual_std))
            else:
                param.copy_(init_rng.normal(param.shape, gl.INIT_STD))
    return model


def forward(
    model: DecoderModel,
    tokens: torch.Tensor,
    mask: Union[AdditiveMask, torch.Tensor],
    capture_attention: bool = False,
    **kwargs,
) -> ForwardOutput:
    return model(tokens, mask, capture_attention=capture_attention, **kwargs)


def decode_step(
    model: DecoderModel, cache: HybridKVCache, new_token: int
) -> Tuple[torch.Tensor, HybridKVCache]:
    """
    This function runs one incremental decode step over the hybrid cache

    Args:
        model (DecoderModel): model the cache was prefilled with
        cache (HybridKVCache): prefilled cache; mutated in place
        new_token (int): token at absolute position cache.next_position

    Raises:
        CacheMismatchError: cache built for a different ModelConfig
        PositionOverflowError: position reaches max_position

    Returns:
        Tuple[torch.Tensor, HybridKVCache]: logits row (vocab,) and the updated cache
    """
    return model.decode_step(cache, new_token), cache


def kv_projection_parameters(config: ModelConfig) -> int:
    return config.n_layers * 2 * config.d_model * config.n_kv_heads * config.head_dim


def parameter_count(config: ModelConfig) -> int:
    """
    This function returns the closed-form parameter count.
    For MHA this is 2*V*d + L*(4*d^2 + 2*d*d_ff + 4*d) + 2*d.

    Args:
        config (ModelConfig): architecture

    Returns:
        int: number of trainable parameters
    """
    d = config.d_model
    attention = 2 * d * config.n_q_heads * config.head_dim + kv_projection_parameters(config) // config.n_layers
    per_layer = attention + 2 * d * config.d_ff + 2 * 2 * d
    return 2 * config.vocab_size * d + config.n_layers * per_layer + 2 * d
