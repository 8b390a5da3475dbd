"""
Attention masks over a (prefix, generated) layout.

A query inside the prefix attends causally. A query at generated position i
attends every prefix key plus generated keys j with j <= i and i - j <= W,
i.e. the W previous generated tokens and itself. The curriculum mask replaces
the -inf on out-of-window generated keys with a finite penalty -tau; future
keys always stay at -inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch

from hwattn.engine.model import SequenceLayout

NEG_INF = float("-inf")


@dataclass(frozen=True)
class WindowSpec:
    """
    Sliding-window size W over generated tokens; None means unbounded (full attention)
    """

    window: Optional[int] = None

    def __post_init__(self) -> None:
        if self.window is not None and (isinstance(self.window, bool) or int(self.window) < 1):
            raise ValueError(f"window must be >= 1 when bounded, got {self.window}")

    @classmethod
    def unbounded(cls) -> WindowSpec:
        return cls(None)

    @classmethod
    def bounded(cls, window: int) -> WindowSpec:
        return cls(int(window))

    @classmethod
    def parse(cls, text: Union[str, int, None]) -> WindowSpec:
        """
        This method reads "inf"/"none"/"full" as unbounded and anything else as an integer window

        Args:
            text (Union[str, int, None]): window flag value

        Returns:
            WindowSpec: parsed window
        """
        if text is None or isinstance(text, int):
            return cls(text)
        text = str(text).strip().lower()
        if text in ("inf", "none", "full", "unbounded"):
            return cls.unbounded()
        return cls.bounded(int(text))

    @property
    def is_unbounded(self) -> bool:
        return self.window is None

    def __str__(self) -> str:
        return "inf" if self.window is None else str(self.window)


@dataclass(frozen=True)
class AdditiveMask:
    """
    Dense additive mask, entries (total, total) in {0} U [-inf, 0).
    Row i holds the penalties query i applies to each key.
    """

    layout: SequenceLayout
    entries: torch.Tensor

    def visible(self) -> torch.Tensor:
        return self.entries == 0

    def hard(self) -> bool:
        return bool(((self.entries == 0) | torch.isneginf(self.entries)).all())


def _grid(layout: SequenceLayout):
    idx = torch.arange(layout.total)
    return idx.unsqueeze(1), idx.unsqueeze(0)


def _window_visibility(layout: SequenceLayout, w: WindowSpec) -> torch.Tensor:
    i, j = _grid(layout)
    causal = j <= i
    if w.is_unbounded:
        return causal
    p = layout.prefix_len
    return causal & ((i < p) | (j < p) | (i - j <= w.window))


def _from_visibility(layout: SequenceLayout, visible: torch.Tensor) -> AdditiveMask:
    entries = torch.full(visible.shape, NEG_INF, dtype=torch.float32)
    entries[visible] = 0.0
    return AdditiveMask(layout=layout, entries=entries)


def is_visible(query_pos: int, key_pos: int, prefix_len: int, w: WindowSpec) -> bool:
    """
    This function is the implicit form of the hybrid rule for a single (query, key)
    pair, used where a dense mask would cost O(T^2)

    Args:
        query_pos (int): absolute query position
        key_pos (int): absolute key position
        prefix_len (int): conditioning prefix length
        w (WindowSpec): window over generated keys

    Returns:
        bool: True when the key is visible to the query
    """
    if key_pos > query_pos:
        return False
    if query_pos < prefix_len or key_pos < prefix_len or w.is_unbounded:
        return True
    return query_pos - key_pos <= w.window


def causal_full_mask(layout: SequenceLayout) -> AdditiveMask:
    i, j = _grid(layout)
    return _from_visibility(layout, j <= i)


def hybrid_mask(layout: SequenceLayout, w: WindowSpec) -> AdditiveMask:
    """
    This function builds the hard global-prefix plus sliding-window mask

    Args:
        layout (SequenceLayout): prefix and generated lengths
        w (WindowSpec): window over generated keys; unbounded gives the causal mask

    Returns:
        AdditiveMask: entries 0 on visible keys, -inf elsewhere
    """
    return _from_visibility(layout, _window_visibility(layout, w))


def penalty_positions(layout: SequenceLayout, w_of_t: int) -> torch.Tensor:
    """Boolean matrix of causal keys that the window w_of_t hides."""
    i, j = _grid(layout)
    return (j <= i) & ~_window_visibility(layout, WindowSpec.bounded(w_of_t))


def curriculum_mask(layout: SequenceLayout, w_of_t: int, tau_of_t: float) -> AdditiveMask:
    """
    This function builds the soft curriculum mask: out-of-window generated keys
    carry -tau_of_t, future keys -inf, everything else 0

    Args:
        layout (SequenceLayout): prefix and generated lengths
        w_of_t (int): effective window at this step
        tau_of_t (float): penalty, >= 0

    Raises:
        ValueError: negative penalty

    Returns:
        AdditiveMask: soft mask; tau 0 equals the causal mask
    """
    if not tau_of_t >= 0:
        raise ValueError(f"tau_of_t must be >= 0, got {tau_of_t}")
    i, j = _grid(layout)
    entries = torch.full((layout.total, layout.total), NEG_INF, dtype=torch.float32)
    entries[j <= i] = 0.0
    entries[penalty_positions(layout, w_of_t)] = -float(tau_of_t) if tau_of_t > 0 else 0.0
    return AdditiveMask(layout=layout, entries=entries)
