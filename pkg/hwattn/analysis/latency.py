"""
Per-step decode latency for full vs windowed attention.

Each repeat prefills the prefix and greedily decodes n_tokens, timing every
decode_step. The per-index median over repeats is kept after the warmup steps
are dropped, and a least-squares line is fitted to time vs token index.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import stats

from hwattn.analysis.costmodel import visible_len_at
from hwattn.engine.kvcache import prefill
from hwattn.engine.masking import WindowSpec
from hwattn.engine.model import DecoderModel, decode_step
from hwattn.engine.numerics import Rng, configure_torch
from hwattn.run import Global as gl

logger = logging.getLogger(__name__)


class TimerResolutionError(RuntimeError):
    pass


@dataclass
class LatencyTrace:
    variant: str
    token_index: np.ndarray
    step_time_s: np.ndarray
    visible_len: np.ndarray
    slope_s_per_token: float
    intercept_s: float
    p_value: Optional[float] = None
    tokens: List[int] = field(default_factory=list, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "variant": self.variant,
                "token_index": self.token_index,
                "step_time_s": self.step_time_s,
                "visible_len": self.visible_len,
            },
            columns=gl.LATENCY_TRACE_COLUMNS,
        )


def fit_slope(token_index: Sequence[float], step_time_s: Sequence[float]) -> Tuple[float, float]:
    fit = stats.linregress(np.asarray(token_index, dtype=float), np.asarray(step_time_s, dtype=float))
    return float(fit.slope), float(fit.intercept)


def slope_p_value(
    token_index: Sequence[float],
    step_time_s: Sequence[float],
    rng: Rng,
    n_resamples: int = gl.PERMUTATION_RESAMPLES,
) -> float:
    """
    This function tests for a positive slope by permuting the times against the token index

    Args:
        token_index (Sequence[float]): x values
        step_time_s (Sequence[float]): y values
        rng (Rng): stream for the permutations
        n_resamples (int, optional): permutations. Defaults to gl.PERMUTATION_RESAMPLES.

    Returns:
        float: one-sided p-value of the observed least-squares slope
    """
    x = np.asarray(token_index, dtype=float)
    x = x - x.mean()
    denom = float(x @ x)

    def slope(y, axis=-1):
        y = np.moveaxis(y, axis, -1)
        return (y - y.mean(axis=-1, keepdims=True)) @ x / denom

    result = stats.permutation_test(
        (np.asarray(step_time_s, dtype=float),),
        slope,
        permutation_type="pairings",
        vectorized=True,
        n_resamples=n_resamples,
        alternative="greater",
        random_state=rng.generator,
    )
    return float(result.pvalue)


def latency_bench(
    model: DecoderModel,
    prefix: Sequence[int],
    n_tokens: int,
    variant: WindowSpec,
    repeats: int = 3,
    warmup: int = gl.LATENCY_WARMUP_STEPS,
    rng: Optional[Rng] = None,
    timer: Callable[[], int] = time.perf_counter_ns,
    resolution_s: Optional[float] = None,
) -> LatencyTrace:
    """
    This function measures per-step decode wall time for one attention variant

    Args:
        model (DecoderModel): model to decode with
        prefix (Sequence[int]): conditioning prefix
        n_tokens (int): tokens decoded per repeat, warmup included
        variant (WindowSpec): unbounded for full attention, bounded for the windowed cache
        repeats (int, optional): runs per token index; the median is kept. Defaults to 3.
        warmup (int, optional): leading steps discarded. Defaults to gl.LATENCY_WARMUP_STEPS.
        rng (Optional[Rng], optional): stream for the permutation test. Defaults to Rng(0).
        timer (Callable[[], int], optional): nanosecond clock. Defaults to time.perf_counter_ns.
        resolution_s (Optional[float], optional): clock resolution. Defaults to the perf_counter resolution.

    Raises:
        ValueError: too few tokens for the variant or the warmup
        TimerResolutionError: median step shorter than 10 clock ticks
        RuntimeError: greedy trajectories differ between repeats

    Returns:
        LatencyTrace: median per-step times, fitted slope and its permutation p-value
    """
    if not variant.is_unbounded and n_tokens < 4 * variant.window:
        raise ValueError(f"n_tokens={n_tokens} must be >= 4 * W = {4 * variant.window} for the windowed variant")
    if n_tokens <= warmup + 1:
        raise ValueError(f"n_tokens={n_tokens} leaves no timed steps after warmup={warmup}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if resolution_s is None:
        resolution_s = time.get_clock_info("perf_counter").resolution
    rng = rng if rng is not None else Rng(0)
    configure_torch(1)
    model.eval()
    name = "full" if variant.is_unbounded else f"windowed-{variant.window}"

    times_ns = np.zeros((repeats, n_tokens))
    trajectories = []
    for r in range(repeats):
        cache = prefill(model, prefix, variant)
        logits = cache.prefix_logits
        tokens = []
        for k in range(n_tokens):
            token = int(torch.argmax(logits))
            start = timer()
            logits, cache = decode_step(model, cache, token)
            times_ns[r, k] = timer() - start
            tokens.append(token)
        trajectories.append(tokens)
        logger.info(f"latency {name}: repeat {r + 1}/{repeats} done")
    if any(t != trajectories[0] for t in trajectories[1:]):
        raise RuntimeError("greedy token trajectories differ between repeats")

    median_s = np.median(times_ns, axis=0)[warmup:] / 1e9
    if np.median(median_s) < gl.LATENCY_MIN_TICKS * resolution_s:
        raise TimerResolutionError(
            f"median step {np.median(median_s):.3g}s is under {gl.LATENCY_MIN_TICKS} timer ticks; use a larger model"
        )
    index = np.arange(warmup + 1, n_tokens + 1)
    slope, intercept = fit_slope(index, median_s)
    p_value = slope_p_value(index, median_s, rng.child(name))
    prefix_len = len(prefix)
    logger.info(f"latency {name}: slope {slope:.3e} s/token, p={p_value:.4f}")
    return LatencyTrace(
        variant=name,
        token_index=index,
        step_time_s=median_s,
        visible_len=np.array([visible_len_at(prefix_len, int(k), variant) for k in index]),
        slope_s_per_token=slope,
        intercept_s=intercept,
        p_value=p_value,
        tokens=trajectories[0],
    )
