"""
Adaptation objective: cross-entropy on ground-truth tokens plus a skewed KL
term pulling the windowed student toward the frozen full-attention teacher.

    skew_kl(p, q, b) = KL(p || b * p + (1 - b) * q),   p = teacher, q = student
    total            = ce * [enable_ce] + lam * kl * [enable_kl]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from hwattn.engine.masking import AdditiveMask, causal_full_mask
from hwattn.engine.model import DecoderModel, SequenceLayout
from hwattn.engine.numerics import ShapeError, cross_entropy
from hwattn.run.exceptions import ConfigError


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    skew: float = 0.1
    enable_ce: bool = True
    enable_kl: bool = True

    def validate(self) -> DistillConfig:
        if not self.lam >= 0:
            raise ConfigError("lam", f"must be >= 0, got {self.lam}")
        if not 0 <= self.skew < 1:
            raise ConfigError("skew", f"must lie in [0, 1), got {self.skew}")
        if not (self.enable_ce or self.enable_kl):
            raise ConfigError("enable_ce", "at least one of enable_ce / enable_kl must be set")
        return self


@dataclass
class LossReport:
    step: int
    total: float
    ce: float
    kl: float
    window: int
    tau: float
    lr: float

    def as_row(self) -> dict:
        return {
            "step": self.step,
            "total": self.total,
            "ce": self.ce,
            "kl": self.kl,
            "window": self.window,
            "tau": self.tau,
            "lr": self.lr,
        }


@dataclass
class OptimizerState:
    """AdamW with cosine learning-rate decay, advanced once per student update."""

    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    grad_clip: float = 1.0
    step: int = 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def make_optimizer(
    model: DecoderModel,
    lr: float,
    total_steps: int,
    weight_decay: float = 0.01,
    betas: Tuple[float, float] = (0.9, 0.95),
    grad_clip: float = 1.0,
) -> OptimizerState:
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, betas=betas, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, total_steps))
    return OptimizerState(optimizer=optimizer, scheduler=scheduler, grad_clip=grad_clip)


def _check_skew(skew: float) -> None:
    if skew == 1:
        raise ValueError("skew = 1 makes the divergence identically zero")
    if not 0 <= skew < 1:
        raise ValueError(f"skew must lie in [0, 1), got {skew}")


def skew_kl(teacher_probs: torch.Tensor, student_probs: torch.Tensor, skew: float) -> torch.Tensor:
    """
    This function returns KL(p || skew * p + (1 - skew) * q) over the last axis, in float64.
    Zero-probability teacher entries contribute nothing.

    Args:
        teacher_probs (torch.Tensor): p, distributions over the last axis
        student_probs (torch.Tensor): q, same shape
        skew (float): mixing weight of the teacher, in [0, 1)

    Raises:
        ShapeError: shapes differ
        ValueError: skew outside [0, 1)

    Returns:
        torch.Tensor: one divergence per distribution (scalar for 1-D input), >= 0
    """
    if teacher_probs.shape != student_probs.shape:
        raise ShapeError("skew_kl", teacher_probs.shape, student_probs.shape)
    _check_skew(skew)
    p = teacher_probs.double()
    mix = skew * p + (1.0 - skew) * student_probs.double()
    kl = (torch.special.xlogy(p, p) - torch.special.xlogy(p, mix)).sum(dim=-1)
    return kl.clamp_min(0.0)


def skew_kl_from_logits(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, skew: float
) -> torch.Tensor:
    """
    This function is skew_kl computed in log space from logits, per row, in float64.
    The mixture's log is taken with logaddexp so small student probabilities do not underflow.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError("skew_kl", teacher_logits.shape, student_logits.shape)
    _check_skew(skew)
    log_p = F.log_softmax(teacher_logits.double(), dim=-1)
    log_q = F.log_softmax(student_logits.double(), dim=-1)
    if skew > 0:
        log_mix = torch.logaddexp(log_p + math.log(skew), log_q + math.log1p(-skew))
    else:
        log_mix = log_q
    return (log_p.exp() * (log_p - log_mix)).sum(dim=-1).clamp_min(0.0)


def distill_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    targets: torch.Tensor,
    cfg: DistillConfig,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    This function combines ground-truth cross-entropy and skew KL over generated positions.
    Callers pass only the rows that predict generated tokens. The teacher side is detached.

    Args:
        teacher_logits (torch.Tensor): (..., n, vocab)
        student_logits (torch.Tensor): (..., n, vocab)
        targets (torch.Tensor): (..., n) ground-truth ids
        cfg (DistillConfig): weights and switches

    Raises:
        ShapeError: logits or targets shapes disagree

    Returns:
        Tuple[torch.Tensor, torch.Tensor, torch.Tensor]: total, ce part, kl part; parts are position means
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError("distill_loss", teacher_logits.shape, student_logits.shape)
    if student_logits.shape[:-1] != targets.shape:
        raise ShapeError("distill_loss targets", student_logits.shape, targets.shape)
    ce = cross_entropy(student_logits, targets)
    kl = skew_kl_from_logits(teacher_logits.detach(), student_logits, cfg.skew).mean().to(student_logits.dtype)
    total = torch.zeros((), dtype=student_logits.dtype)
    if cfg.enable_ce:
        total = total + ce
    if cfg.enable_kl:
        total = total + cfg.lam * kl
    return total, ce, kl


def generated_slice(layout: SequenceLayout) -> slice:
    """Logits rows that predict generated tokens: prefix_len - 1 .. total - 2."""
    return slice(layout.prefix_len - 1, layout.total - 1)


def teacher_student_step(
    teacher: DecoderModel,
    student: DecoderModel,
    batch: torch.Tensor,
    mask_for_student: AdditiveMask,
    cfg: DistillConfig,
    optimizer_state: OptimizerState,
    teacher_mask: Optional[AdditiveMask] = None,
    window: int = 0,
    tau: float = math.inf,
) -> Tuple[LossReport, DecoderModel]:
    """
    This function runs one teacher-forced distillation update on the student.
    The teacher sees the batch under the full causal mask, the student under mask_for_student.

    Args:
        teacher (DecoderModel): frozen full-attention model
        student (DecoderModel): model being adapted
        batch (torch.Tensor): (batch, total) token ids, prefix then generated tokens
        mask_for_student (AdditiveMask): curriculum or hybrid mask over the batch layout
        cfg (DistillConfig): loss weights
        optimizer_state (OptimizerState): AdamW + cosine schedule for the student
        teacher_mask (Optional[AdditiveMask], optional): precomputed causal mask. Defaults to None.
        window (int, optional): W(t), recorded in the report. Defaults to 0.
        tau (float, optional): tau(t), recorded in the report. Defaults to inf (hard mask).

    Returns:
        Tuple[LossReport, DecoderModel]: losses before the update and the updated student
    """
    layout = mask_for_student.layout
    if batch.shape[-1] != layout.total:
        raise ShapeError("teacher_student_step", batch.shape, (layout.total,))
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student vocab sizes differ")
    rows = generated_slice(layout)
    targets = batch[..., layout.prefix_len :]

    with torch.no_grad():
        teacher_logits = teacher(batch, teacher_mask or causal_full_mask(layout)).logits[..., rows, :]
    student.train()
    student_logits = student(batch, mask_for_student).logits[..., rows, :]
    total, ce, kl = distill_loss(teacher_logits, student_logits, targets, cfg)

    optimizer_state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if optimizer_state.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(student.parameters(), optimizer_state.grad_clip)
    lr = optimizer_state.lr
    optimizer_state.optimizer.step()
    optimizer_state.scheduler.step()
    report = LossReport(
        step=optimizer_state.step,
        total=float(total.detach()),
        ce=float(ce.detach()),
        kl=float(kl.detach()),
        window=int(window),
        tau=float(tau),
        lr=lr,
    )
    optimizer_state.step += 1
    return report, student
