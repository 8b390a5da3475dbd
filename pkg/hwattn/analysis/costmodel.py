"""
Analytical KV-cache and per-step FLOPs model for full vs windowed decoding.

Per decode step (2 FLOPs per multiply-accumulate):
    constant  = n_layers * (2*d*q_dim + 4*d*kv_dim + 2*q_dim*d + 4*d*d_ff) + 2*d*vocab
    attention = 4 * n_layers * n_q_heads * head_dim * visible_len   (QK^T and weights @ V)
with q_dim = n_q_heads * head_dim and kv_dim = n_kv_heads * head_dim. Norms,
activations and softmax are left out; they are lower order at these sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from hwattn.engine.kvcache import cache_bytes
from hwattn.engine.masking import WindowSpec
from hwattn.engine.model import ModelConfig
from hwattn.run import Global as gl


def kv_cost(config: ModelConfig, prefix_len: int, gen_len: int, w: WindowSpec) -> int:
    """
    This function returns fp32 KV bytes once gen_len tokens have been generated

    Args:
        config (ModelConfig): architecture
        prefix_len (int): conditioning prefix length
        gen_len (int): generated tokens
        w (WindowSpec): window; unbounded for full attention

    Returns:
        int: bytes
    """
    return cache_bytes(config, prefix_len=prefix_len, steps=gen_len, w=w)


def constant_flops(config: ModelConfig) -> int:
    d = config.d_model
    q_dim = config.n_q_heads * config.head_dim
    kv_dim = config.n_kv_heads * config.head_dim
    per_layer = 2 * d * q_dim + 2 * 2 * d * kv_dim + 2 * q_dim * d + 2 * 2 * d * config.d_ff
    return config.n_layers * per_layer + 2 * d * config.vocab_size


def attention_flops(config: ModelConfig, visible_len: int) -> int:
    return 4 * config.n_layers * config.n_q_heads * config.head_dim * visible_len


def flops_per_step(config: ModelConfig, visible_len: int, include_constant: bool = True) -> int:
    """
    This function returns the FLOPs of one decode step over visible_len keys.
    FLOPs use the full number of query heads, whatever the KV head count.

    Args:
        config (ModelConfig): architecture
        visible_len (int): keys the query attends, self included
        include_constant (bool, optional): add projection/MLP/head FLOPs. Defaults to True.

    Returns:
        int: FLOPs
    """
    return (constant_flops(config) if include_constant else 0) + attention_flops(config, visible_len)


def visible_len_at(prefix_len: int, step: int, w: WindowSpec) -> int:
    """Keys visible to generated token `step` (1-based): the prefix plus min(step, W + 1) generated keys."""
    if w.is_unbounded:
        return prefix_len + step
    return prefix_len + min(step, w.window + 1)


@dataclass
class CostReport:
    """
    Per-step columns: step, full_kv_bytes, windowed_kv_bytes, full_flops, windowed_flops,
    cum_full_flops, cum_windowed_flops. KV bytes are measured after the step's entry is appended.
    """

    config: ModelConfig
    prefix_len: int
    gen_len: int
    window: WindowSpec
    steps: pd.DataFrame = field(repr=False)

    @property
    def full_kv_bytes(self) -> int:
        return kv_cost(self.config, self.prefix_len, self.gen_len, WindowSpec.unbounded())

    @property
    def windowed_kv_bytes(self) -> int:
        return kv_cost(self.config, self.prefix_len, self.gen_len, self.window)

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.windowed_kv_bytes / self.full_kv_bytes)

    @property
    def full_flops(self) -> int:
        return int(self.steps["full_flops"].sum())

    @property
    def windowed_flops(self) -> int:
        return int(self.steps["windowed_flops"].sum())

    @property
    def flops_speedup(self) -> float:
        return self.full_flops / self.windowed_flops if self.gen_len else 1.0

    def summary(self) -> dict:
        return {
            "prefix_len": self.prefix_len,
            "gen_len": self.gen_len,
            "window": str(self.window),
            "full_kv_mb": gl.bytes_to_mb(self.full_kv_bytes),
            "windowed_kv_mb": gl.bytes_to_mb(self.windowed_kv_bytes),
            "reduction_pct": self.reduction_pct,
            "full_gflops": self.full_flops / 1e9,
            "windowed_gflops": self.windowed_flops / 1e9,
            "flops_speedup": self.flops_speedup,
        }


def cost_report(config: ModelConfig, prefix_len: int, gen_len: int, w: WindowSpec) -> CostReport:
    """
    This function tabulates KV bytes and FLOPs per decode step for full and windowed attention

    Args:
        config (ModelConfig): architecture
        prefix_len (int): conditioning prefix length
        gen_len (int): tokens to generate
        w (WindowSpec): window of the windowed variant

    Returns:
        CostReport: per-step table with cumulative FLOPs and summary properties
    """
    config.validate()
    full = WindowSpec.unbounded()
    step = np.arange(1, gen_len + 1)
    const = constant_flops(config)
    unit = attention_flops(config, 1)
    full_visible = np.array([visible_len_at(prefix_len, int(k), full) for k in step], dtype=np.int64)
    win_visible = np.array([visible_len_at(prefix_len, int(k), w) for k in step], dtype=np.int64)
    steps = pd.DataFrame(
        {
            "step": step,
            "full_kv_bytes": [kv_cost(config, prefix_len, int(k), full) for k in step],
            "windowed_kv_bytes": [kv_cost(config, prefix_len, int(k), w) for k in step],
            "full_flops": const + unit * full_visible,
            "windowed_flops": const + unit * win_visible,
        }
    )
    steps["cum_full_flops"] = steps["full_flops"].cumsum()
    steps["cum_windowed_flops"] = steps["windowed_flops"].cumsum()
    return CostReport(config=config, prefix_len=prefix_len, gen_len=gen_len, window=w, steps=steps)


def reduction_from_mb(full_mb: float, windowed_mb: float) -> float:
    return 100.0 * (1.0 - windowed_mb / full_mb)


def speedup_from_gflops(full_gflops: float, windowed_gflops: float) -> float:
    return full_gflops / windowed_gflops


def derive_prefix_len(full_mb: float, windowed_mb: float, gen_len: int, window: int) -> float:
    """
    This function solves (p + W) / (p + G) = windowed / full for the prefix length p

    Args:
        full_mb (float): full-attention cache size
        windowed_mb (float): windowed cache size
        gen_len (int): generated tokens G
        window (int): window W

    Returns:
        float: prefix length implied by the pair
    """
    r = windowed_mb / full_mb
    return (r * gen_len - window) / (1.0 - r)


def preset_report(name: str) -> CostReport:
    preset = gl.get_preset(name)
    config = ModelConfig.from_dict(preset["model"])
    return cost_report(config, preset["prefix_len"], gl.preset_gen_len(name), WindowSpec.bounded(preset["window"]))


def published_summary(name: str) -> dict:
    """
    This function recomputes reduction and speedup from the published MB and GFLOPs pairs

    Args:
        name (str): preset name

    Returns:
        dict: published inputs plus derived reduction_pct, speedup and implied prefix length
    """
    published = gl.PUBLISHED_COST[name]
    full_mb, windowed_mb = published["kv_mb"]
    preset = gl.get_preset(name)
    return {
        "full_kv_mb": full_mb,
        "windowed_kv_mb": windowed_mb,
        "reduction_pct": reduction_from_mb(full_mb, windowed_mb),
        "speedup": speedup_from_gflops(*published["gflops"]),
        "implied_prefix_len": derive_prefix_len(full_mb, windowed_mb, gl.preset_gen_len(name), preset["window"]),
    }
