"""
Attention-mass decomposition of decode queries.

For each eligible generated query the attention row is split into mass on the
prefix ("prompt") and on generated keys; the local share is the part of the
generated mass that a W-windowed model keeps (the W previous generated keys
plus the query itself). Coverage = prompt + generated * local / 100 is the
fraction of attention the windowed model retains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from hwattn.engine.model import SequenceLayout
from hwattn.run import Global as gl


def coverage(prompt_mass: float, generated_mass: float, local_w_over_gen: float) -> float:
    return prompt_mass + generated_mass * local_w_over_gen / 100.0


@dataclass(frozen=True)
class AttentionStats:
    """All masses in percent."""

    prompt_mass: float
    generated_mass: float
    local_w_over_gen: float
    coverage: float
    window_used: int
    n_queries: int = 0

    @classmethod
    def from_components(
        cls, prompt_mass: float, generated_mass: float, local_w_over_gen: float, window_used: int, n_queries: int = 0
    ) -> AttentionStats:
        return cls(
            prompt_mass=prompt_mass,
            generated_mass=generated_mass,
            local_w_over_gen=local_w_over_gen,
            coverage=coverage(prompt_mass, generated_mass, local_w_over_gen),
            window_used=window_used,
            n_queries=n_queries,
        )

    def identity_gap(self) -> float:
        return abs(self.coverage - coverage(self.prompt_mass, self.generated_mass, self.local_w_over_gen))

    def as_row(self, source: str = "") -> dict:
        return {
            "source": source,
            "window_used": self.window_used,
            "prompt_mass": self.prompt_mass,
            "generated_mass": self.generated_mass,
            "local_w_over_gen": self.local_w_over_gen,
            "coverage": self.coverage,
            "n_queries": self.n_queries,
        }


def published_stats(name: str) -> AttentionStats:
    """
    This function rebuilds a published decomposition row from its prompt/generated/local inputs

    Args:
        name (str): preset name with a published row

    Returns:
        AttentionStats: stats whose coverage is recomputed, not copied
    """
    row = gl.PUBLISHED_ATTENTION[name]
    return AttentionStats.from_components(
        row["prompt"], row["generated"], row["local_over_gen"], gl.get_preset(name)["window"]
    )


def _as_batched(weights: torch.Tensor) -> torch.Tensor:
    if weights.dim() == 3:
        return weights.unsqueeze(0)
    if weights.dim() != 4:
        raise ValueError(f"attention weights must be (heads, q, k) or (batch, heads, q, k), got {tuple(weights.shape)}")
    return weights


def attention_decomposition(
    attention_weights: Sequence[torch.Tensor],
    layout: SequenceLayout,
    w: int,
    min_predecessors: Optional[int] = None,
    layer_weights: Optional[Sequence[float]] = None,
) -> AttentionStats:
    """
    This function decomposes captured attention into prompt / generated / local shares

    Args:
        attention_weights (Sequence[torch.Tensor]): one tensor per layer, (heads, T, T) or (batch, heads, T, T),
            rows over keys, captured from a full-attention forward with T = layout.total
        layout (SequenceLayout): prefix and generated lengths
        w (int): window whose local share is measured
        min_predecessors (Optional[int], optional): generated tokens a query needs before it counts. Defaults to w.
        layer_weights (Optional[Sequence[float]], optional): relative layer weights. Defaults to uniform.

    Raises:
        ValueError: no weights, wrong shapes, or no eligible query

    Returns:
        AttentionStats: averages over layers (weighted), heads, batch and eligible queries
    """
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    if not attention_weights:
        raise ValueError("no attention weights given")
    min_predecessors = w if min_predecessors is None else min_predecessors
    p, total = layout.prefix_len, layout.total
    queries = torch.arange(p + min_predecessors, total)
    if queries.numel() == 0:
        raise ValueError(
            f"no decode query has {min_predecessors} generated predecessors (prefix {p}, total {total})"
        )
    keys = torch.arange(total)
    local = (keys[None, :] >= p) & (keys[None, :] <= queries[:, None]) & (queries[:, None] - keys[None, :] <= w)

    if layer_weights is None:
        layer_weights = [1.0] * len(attention_weights)
    if len(layer_weights) != len(attention_weights):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(attention_weights)} layers")
    lw = torch.tensor(layer_weights, dtype=torch.float64)
    lw = lw / lw.sum()

    prompt_l, local_l = [], []
    for weights in attention_weights:
        weights = _as_batched(weights)
        if tuple(weights.shape[-2:]) != (total, total):
            raise ValueError(f"attention weights {tuple(weights.shape)} do not match layout total {total}")
        rows = weights[..., queries, :].double()
        prompt = rows[..., :p].sum(dim=-1)
        generated = rows[..., p:].sum(dim=-1)
        kept = (rows * local).sum(dim=-1)
        ratio = torch.where(generated > 0, kept / generated.clamp_min(1e-300), torch.ones_like(generated))
        prompt_l.append(prompt.mean())
        local_l.append(ratio.clamp(0.0, 1.0).mean())

    prompt_mass = 100.0 * float((torch.stack(prompt_l) * lw).sum())
    local_share = 100.0 * float((torch.stack(local_l) * lw).sum())
    return AttentionStats.from_components(
        prompt_mass=prompt_mass,
        generated_mass=100.0 - prompt_mass,
        local_w_over_gen=local_share,
        window_used=w,
        n_queries=int(queries.numel()),
    )
