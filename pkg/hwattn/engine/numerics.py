"""
Dense numeric kernels shared by the engine: checked matmul, masked softmax,
cross-entropy, token sampling and the seeded random stream.

Compute runs in 32-bit floats; losses are accumulated in 64-bit and rounded
back to the input dtype.
"""

from __future__ import annotations

import zlib
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from hwattn.run import Global as gl

Matrix = torch.Tensor


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    def __init__(self, op: str, a_shape: Sequence[int], b_shape: Sequence[int]) -> None:
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{op}: incompatible shapes {self.a_shape} and {self.b_shape}")


def configure_torch(threads: int = gl.TORCH_THREADS) -> None:
    """
    This function pins torch to a fixed intra-op thread count so reductions are reproducible

    Args:
        threads (int, optional): number of intra-op threads. Defaults to gl.TORCH_THREADS.
    """
    torch.set_num_threads(max(1, int(threads)))


def _check_finite(op: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NumericsError(f"{op}: non-finite output")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    This function multiplies two matrices after checking their inner dimensions

    Args:
        a (Matrix): left operand, shape (..., n, k)
        b (Matrix): right operand, shape (..., k, m)

    Raises:
        ShapeError: a.cols != b.rows

    Returns:
        Matrix: product, shape (..., n, m)
    """
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _check_finite("matmul", a @ b)


def masked_softmax(logits: Matrix, additive_mask: Matrix) -> Matrix:
    """
    This function adds an additive mask to logits and normalizes every row.
    Masked entries carry -inf (hard) or a finite negative penalty (soft).

    Args:
        logits (Matrix): attention logits, shape (..., q, k)
        additive_mask (Matrix): same shape as logits, entries in [-inf, 0]

    Raises:
        ShapeError: shapes differ
        NumericsError: positive mask entries, or a row with every key at -inf

    Returns:
        Matrix: row-stochastic weights, same shape as logits
    """
    if logits.shape != additive_mask.shape:
        raise ShapeError("masked_softmax", logits.shape, additive_mask.shape)
    if (additive_mask > 0).any():
        raise NumericsError("masked_softmax: mask entries must lie in [-inf, 0]")
    if torch.isneginf(additive_mask).all(dim=-1).any():
        raise NumericsError("masked_softmax: a query row has no visible keys")
    # torch.softmax subtracts the row max internally, so a soft penalty of 1e4 cannot overflow
    scores = logits + additive_mask.to(logits.dtype)
    return torch.softmax(scores, dim=-1)


def softmax(logits: Matrix) -> Matrix:
    return masked_softmax(logits, torch.zeros_like(logits))


def cross_entropy(logits: Matrix, targets: torch.Tensor) -> torch.Tensor:
    """
    This function returns the mean negative log-likelihood of targets under logits

    Args:
        logits (Matrix): shape (n, vocab) or (batch, n, vocab)
        targets (torch.Tensor): integer ids, shape (n,) or (batch, n)

    Raises:
        ShapeError: one logits row per target is required
        NumericsError: target id outside the vocabulary

    Returns:
        torch.Tensor: scalar loss in logits.dtype
    """
    vocab = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.numel() and (int(targets.max()) >= vocab or int(targets.min()) < 0):
        raise NumericsError(f"cross_entropy: target id outside vocab of size {vocab}")
    loss = F.cross_entropy(
        logits.reshape(-1, vocab).double(), targets.reshape(-1).long(), reduction="mean"
    )
    return loss.to(logits.dtype)


def sample_token(
    logits: torch.Tensor, rng: "Rng", temperature: float = 0.0, top_k: int = 0
) -> int:
    """
    This function picks the next token from one logits row.
    temperature 0 is greedy argmax; otherwise tokens are drawn from the tempered
    distribution, optionally restricted to the top_k most likely ids.

    Args:
        logits (torch.Tensor): shape (vocab,)
        rng (Rng): random stream used for sampling
        temperature (float, optional): sampling temperature. Defaults to 0.0.
        top_k (int, optional): keep only the k best ids, 0 keeps all. Defaults to 0.

    Returns:
        int: token id
    """
    if temperature < 0:
        raise NumericsError(f"sample_token: temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return int(torch.argmax(logits))
    scores = logits.detach().double() / temperature
    if 0 < top_k < scores.numel():
        kth = torch.topk(scores, top_k).values[-1]
        scores = torch.where(scores < kth, torch.full_like(scores, -np.inf), scores)
    probs = torch.softmax(scores, dim=-1).numpy()
    return int(rng.choice(probs.size, p=probs / probs.sum()))


class Rng:
    """
    Seeded random stream built on numpy's Philox-4x64 counter-based bit generator.

    Streams are split by extending the SeedSequence spawn key, so a child stream
    depends only on (seed, path of child names) and never on how much the parent
    has been consumed. Identical seeds give identical draws on every platform.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(spawn_key)
        seed_seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seed_seq))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"

    def child(self, name: str) -> Rng:
        return Rng(self.seed, self.spawn_key + (zlib.crc32(name.encode("utf-8")),))

    def split(self, n: int) -> list:
        return [Rng(self.seed, self.spawn_key + (i,)) for i in range(n)]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: Sequence[int], std: float = 1.0) -> torch.Tensor:
        draws = self._gen.standard_normal(tuple(shape), dtype=np.float32) * np.float32(std)
        return torch.from_numpy(np.ascontiguousarray(draws))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def dirichlet(self, alpha: Sequence[float], size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
