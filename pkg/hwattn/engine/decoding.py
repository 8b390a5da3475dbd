from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import pandas as pd
import torch

from hwattn.engine.kvcache import HybridKVCache, prefill
from hwattn.engine.masking import WindowSpec
from hwattn.engine.model import DecoderModel, PositionOverflowError, decode_step
from hwattn.engine.numerics import Rng, sample_token

logger = logging.getLogger(__name__)


@dataclass
class GenerationResult:
    """
    Output of one decode session. cache_trace has one row per decode step with
    columns step, occupancy, cached_positions, bytes.
    """

    prefix: List[int]
    tokens: List[int]
    window: WindowSpec
    cache_trace: pd.DataFrame
    logits: Optional[torch.Tensor] = None
    cache: Optional[HybridKVCache] = field(default=None, repr=False)


def generate(
    model: DecoderModel,
    prefix_tokens: Sequence[int],
    n_tokens: int,
    window: WindowSpec = WindowSpec.unbounded(),
    rng: Optional[Rng] = None,
    temperature: float = 0.0,
    top_k: int = 0,
    keep_logits: bool = False,
) -> GenerationResult:
    """
    This function prefills the prefix and decodes n_tokens autoregressively over the hybrid cache

    Args:
        model (DecoderModel): model
        prefix_tokens (Sequence[int]): conditioning prefix
        n_tokens (int): tokens to generate
        window (WindowSpec, optional): attention window over generated tokens. Defaults to unbounded.
        rng (Optional[Rng], optional): sampling stream, required when temperature > 0. Defaults to None.
        temperature (float, optional): 0 for greedy decoding. Defaults to 0.0.
        top_k (int, optional): top-k filter for sampling, 0 disables. Defaults to 0.
        keep_logits (bool, optional): keep the logits row each token was chosen from. Defaults to False.

    Raises:
        PositionOverflowError: prefix + n_tokens exceeds max_position
        ValueError: sampling requested without an rng

    Returns:
        GenerationResult: tokens, per-step cache trace, optional logits
    """
    prefix = [int(t) for t in prefix_tokens]
    if n_tokens < 0:
        raise ValueError(f"n_tokens must be >= 0, got {n_tokens}")
    if len(prefix) + n_tokens > model.config.max_position:
        raise PositionOverflowError(
            f"prefix {len(prefix)} + {n_tokens} tokens exceeds max_position={model.config.max_position}"
        )
    if temperature > 0 and rng is None:
        raise ValueError("temperature sampling needs an rng")
    sample_rng = rng.child("sample") if rng is not None else None

    model.eval()
    cache = prefill(model, prefix, window)
    logits = cache.prefix_logits
    tokens, rows, trace = [], [], []
    for _ in range(n_tokens):
        if keep_logits:
            rows.append(logits)
        token = sample_token(logits, sample_rng, temperature, top_k)
        tokens.append(token)
        logits, cache = decode_step(model, cache, token)
        trace.append(cache.snapshot())
    logger.info(
        f"generated {n_tokens} tokens, window {window}, final cache {cache.cache_bytes()} bytes"
    )
    return GenerationResult(
        prefix=prefix,
        tokens=tokens,
        window=window,
        cache_trace=pd.DataFrame(trace, columns=["step", "occupancy", "cached_positions", "bytes"]),
        logits=torch.stack(rows) if keep_logits and rows else None,
        cache=cache,
    )
