"""
Two-part inference cache: an immutable global segment holding the prefix keys
and values, and a ring buffer of capacity W over generated tokens. Entries keep
their absolute positions; once the ring is full the oldest slot is overwritten
in place, so storage never grows after step W.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch

from hwattn.engine.masking import WindowSpec, causal_full_mask
from hwattn.engine.model import DecoderModel, ModelConfig, PositionOverflowError, SequenceLayout
from hwattn.run import Global as gl

logger = logging.getLogger(__name__)

# starting ring capacity for unbounded (full-attention) caches; doubled on demand
UNBOUNDED_INITIAL_CAPACITY = 64


class CacheMismatchError(ValueError):
    pass


def cached_positions(prefix_len: int, steps: int, w: WindowSpec) -> int:
    if w.is_unbounded:
        return prefix_len + steps
    return prefix_len + min(steps, w.window)


class HybridKVCache:
    """
    Per-session decode cache.

    Attributes:
        global_k, global_v: (n_layers, kv_heads, prefix_len, head_dim), fixed after prefill
        ring_k, ring_v: (n_layers, kv_heads, capacity, head_dim); capacity never exceeds max_position - prefix_len
        ring_positions_buf: absolute position held by each ring slot, -1 when empty
        allocation_count, allocated_bytes: storage hook, updated only when buffers are (re)allocated
    """

    def __init__(
        self,
        config: ModelConfig,
        global_k: torch.Tensor,
        global_v: torch.Tensor,
        window: WindowSpec,
    ) -> None:
        if global_k.shape != global_v.shape or global_k.dim() != 4:
            raise ValueError(f"global segment shapes differ: {tuple(global_k.shape)} vs {tuple(global_v.shape)}")
        if global_k.shape[2] < 1:
            raise ValueError("global segment must hold at least one prefix position")
        self.config = config
        self.window = window
        self.global_k = global_k.contiguous()
        self.global_v = global_v.contiguous()
        self.prefix_len = int(global_k.shape[2])
        self.steps_taken = 0
        self.prefix_logits: Optional[torch.Tensor] = None
        self.allocation_count = 0
        self.allocated_bytes = 0
        self._order: Optional[torch.Tensor] = None
        self.ring_k = self.ring_v = self.ring_positions_buf = None
        self._allocate_ring(min(UNBOUNDED_INITIAL_CAPACITY if window.is_unbounded else window.window, self.room))

    def _allocate_ring(self, capacity: int) -> None:
        n_layers, kv_heads, _, head_dim = self.global_k.shape
        ring_k = torch.zeros((n_layers, kv_heads, capacity, head_dim), dtype=self.global_k.dtype)
        ring_v = torch.zeros_like(ring_k)
        positions = torch.full((capacity,), -1, dtype=torch.long)
        if self.ring_k is not None:
            # only unbounded rings grow, and they never wrap, so slots copy straight across
            filled = self.steps_taken
            ring_k[:, :, :filled] = self.ring_k[:, :, :filled]
            ring_v[:, :, :filled] = self.ring_v[:, :, :filled]
            positions[:filled] = self.ring_positions_buf[:filled]
        self.ring_k, self.ring_v, self.ring_positions_buf = ring_k, ring_v, positions
        self.allocation_count += 1
        self.allocated_bytes = sum(
            t.numel() * t.element_size()
            for t in (self.global_k, self.global_v, self.ring_k, self.ring_v, self.ring_positions_buf)
        )

    @property
    def capacity(self) -> int:
        return int(self.ring_k.shape[2])

    @property
    def room(self) -> int:
        """Generated positions left before max_position."""
        return max(1, self.config.max_position - self.prefix_len)

    @property
    def occupancy(self) -> int:
        if self.window.is_unbounded:
            return self.steps_taken
        return min(self.steps_taken, self.window.window)

    @property
    def cached_positions(self) -> int:
        return self.prefix_len + self.occupancy

    @property
    def next_position(self) -> int:
        return self.prefix_len + self.steps_taken

    def check_compatible(self, config: ModelConfig) -> None:
        if config != self.config:
            raise CacheMismatchError(f"cache was built for {self.config}, model has {config}")

    def _ring_order(self) -> torch.Tensor:
        if self._order is None:
            occupancy = self.occupancy
            if self.window.is_unbounded or self.steps_taken <= self.capacity:
                self._order = torch.arange(occupancy)
            else:
                head = self.steps_taken % self.capacity
                self._order = torch.cat((torch.arange(head, self.capacity), torch.arange(head)))
        return self._order

    def ring_positions(self) -> List[int]:
        return self.ring_positions_buf[self._ring_order()].tolist()

    def visible_positions(self) -> List[int]:
        return list(range(self.prefix_len)) + self.ring_positions()

    def visible_kv(self, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        This method returns the keys/values the next query may attend: the global
        segment followed by the ring in ascending absolute position

        Args:
            layer (int): layer index

        Returns:
            Tuple[torch.Tensor, torch.Tensor]: keys and values, each (kv_heads, cached_positions, head_dim)
        """
        if self.occupancy == 0:
            return self.global_k[layer], self.global_v[layer]
        order = self._ring_order()
        ring_k = self.ring_k[layer].index_select(1, order)
        ring_v = self.ring_v[layer].index_select(1, order)
        return torch.cat((self.global_k[layer], ring_k), dim=1), torch.cat((self.global_v[layer], ring_v), dim=1)

    def append(self, layer_kv_entries: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> HybridKVCache:
        """
        This method stores one generated token's key/value for every layer

        Args:
            layer_kv_entries (Sequence[Tuple[torch.Tensor, torch.Tensor]]): one (key, value) per layer, each (kv_heads, head_dim)

        Raises:
            PositionOverflowError: the next position reaches max_position
            ValueError: wrong number of layers or entry shape

        Returns:
            HybridKVCache: self
        """
        if len(layer_kv_entries) != self.config.n_layers:
            raise ValueError(f"expected {self.config.n_layers} layer entries, got {len(layer_kv_entries)}")
        if self.next_position >= self.config.max_position:
            raise PositionOverflowError(f"position {self.next_position} exceeds max_position={self.config.max_position}")
        if self.window.is_unbounded:
            if self.steps_taken == self.capacity:
                self._allocate_ring(min(2 * self.capacity, self.room))
            slot = self.steps_taken
        else:
            slot = self.steps_taken % self.capacity
        entry_shape = (self.ring_k.shape[1], self.ring_k.shape[3])
        for layer, (k, v) in enumerate(layer_kv_entries):
            if tuple(k.shape) != entry_shape or tuple(v.shape) != entry_shape:
                raise ValueError(f"layer {layer}: entry shape {tuple(k.shape)} != {entry_shape}")
            self.ring_k[layer, :, slot] = k
            self.ring_v[layer, :, slot] = v
        self.ring_positions_buf[slot] = self.next_position
        self.steps_taken += 1
        self._order = None
        return self

    def cache_bytes(self) -> int:
        return cache_bytes(self)

    def snapshot(self) -> dict:
        return {
            "step": self.steps_taken,
            "occupancy": self.occupancy,
            "cached_positions": self.cached_positions,
            "bytes": self.cache_bytes(),
        }


def prefill(
    model: DecoderModel,
    prefix_tokens: Union[Sequence[int], torch.Tensor],
    window: WindowSpec = WindowSpec.unbounded(),
) -> HybridKVCache:
    """
    This function runs the prefix once under the causal mask and keeps its keys/values as the global segment

    Args:
        model (DecoderModel): model
        prefix_tokens (Union[Sequence[int], torch.Tensor]): conditioning tokens
        window (WindowSpec, optional): ring capacity. Defaults to WindowSpec.unbounded().

    Raises:
        ValueError: empty prefix

    Returns:
        HybridKVCache: cache with an empty ring; prefix_logits holds the last prefix position's logits
    """
    tokens = torch.as_tensor(prefix_tokens, dtype=torch.long).reshape(-1)
    if tokens.numel() == 0:
        raise ValueError("prefill: prefix must not be empty")
    layout = SequenceLayout(prefix_len=int(tokens.numel()))
    with torch.no_grad():
        out = model(tokens, causal_full_mask(layout), capture_kv=True)
    global_k = torch.stack([k for k, _ in out.kv])
    global_v = torch.stack([v for _, v in out.kv])
    cache = HybridKVCache(model.config, global_k, global_v, window)
    cache.prefix_logits = out.logits[-1]
    return cache


def append(cache: HybridKVCache, layer_kv_entries: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> HybridKVCache:
    return cache.append(layer_kv_entries)


def visible_kv(cache: HybridKVCache, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
    return cache.visible_kv(layer)


def cache_bytes(
    source: Union[HybridKVCache, ModelConfig],
    prefix_len: Optional[int] = None,
    steps: Optional[int] = None,
    w: Optional[WindowSpec] = None,
    bytes_per_value: int = gl.FP32_BYTES,
) -> int:
    """
    This function returns fp32 KV bytes: 2 * n_layers * n_kv_heads * head_dim * cached_positions * 4

    Args:
        source (Union[HybridKVCache, ModelConfig]): a live cache, or a config used with the remaining arguments
        prefix_len (Optional[int], optional): prefix length when source is a config. Defaults to None.
        steps (Optional[int], optional): generated steps when source is a config. Defaults to None.
        w (Optional[WindowSpec], optional): window when source is a config. Defaults to unbounded.
        bytes_per_value (int, optional): bytes per stored value. Defaults to gl.FP32_BYTES.

    Returns:
        int: cache size in bytes
    """
    if isinstance(source, HybridKVCache):
        config, positions = source.config, source.cached_positions
    else:
        if prefix_len is None or steps is None:
            raise ValueError("cache_bytes: prefix_len and steps are required with a ModelConfig")
        config = source
        positions = cached_positions(prefix_len, steps, w if w is not None else WindowSpec.unbounded())
    return 2 * config.n_layers * config.n_kv_heads * config.head_dim * positions * bytes_per_value


def write_cache_trace(records: Iterable[dict], path: Union[str, Path]) -> Path:
    """
    This function writes per-step cache snapshots as JSON lines

    Args:
        records (Iterable[dict]): HybridKVCache.snapshot() dictionaries
        path (Union[str, Path]): output file

    Returns:
        Path: written file
    """
    path = Path(path)
    trace = pd.DataFrame(list(records), columns=["step", "occupancy", "cached_positions", "bytes"])
    trace.to_json(path, orient="records", lines=True)
    logger.info(f"wrote {len(trace)} cache snapshots to {path}")
    return path
