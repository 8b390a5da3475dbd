"""
Desk-scale experiment rig.

A synthetic task stands in for prompt-conditioned token streams: the prefix
names one of n_styles (a marker token, a style codeword, then random filler),
and the generated stream is a style-specific order-k Markov chain over the
remaining alphabet, mixed with uniform noise. Global information therefore
lives only in the prefix while the stream itself is local.

The rig pretrains a full-attention teacher, adapts windowed students, and runs
the loss-component x strategy x seed ablation grid.
"""

from __future__ import annotations

import copy
import functools
import logging
import math
from dataclasses import asdict, dataclass, replace
from functools import partial
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.special import entr

from hwattn.adapt.distill import (
    DistillConfig,
    generated_slice,
    make_optimizer,
    teacher_student_step,
)
from hwattn.adapt.schedule import CurriculumSchedule, tau_at, window_at
from hwattn.engine.checkpoint import load_checkpoint, save_checkpoint
from hwattn.engine.masking import AdditiveMask, WindowSpec, causal_full_mask, hybrid_mask
from hwattn.engine.model import DecoderModel, ModelConfig, SequenceLayout, init_model
from hwattn.engine.numerics import Rng, configure_torch, cross_entropy
from hwattn.run import Global as gl
from hwattn.run.exceptions import ConfigError

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, history: pd.DataFrame) -> None:
        self.history = history
        super().__init__(f"{message}\n{history.tail(5).to_string(index=False)}")


# --------------------------- ###  configuration ### ----------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """
    Synthetic prefix-conditioned sequence task.

    Token ids [0, alphabet_size) are stream symbols; ids [alphabet_size, vocab_size)
    are the style markers. seq_len is the length of the generated stream.
    """

    vocab_size: int = 64
    prefix_len: int = 24
    seq_len: int = 256
    n_styles: int = 8
    transition_order: int = 2
    noise: float = 0.05
    n_style_tokens: int = 8
    branching: int = 4
    concentration: float = 1.0
    n_train: int = 2048
    n_valid: int = 128

    @property
    def alphabet_size(self) -> int:
        return self.vocab_size - self.n_styles

    @property
    def n_contexts(self) -> int:
        return self.alphabet_size**self.transition_order

    @property
    def total_len(self) -> int:
        return self.prefix_len + self.seq_len

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(prefix_len=self.prefix_len, gen_len=self.seq_len)

    def validate(self) -> SyntheticTaskSpec:
        for name in ("vocab_size", "prefix_len", "seq_len", "n_styles", "transition_order", "n_style_tokens", "branching", "n_train", "n_valid"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.alphabet_size < 2:
            raise ConfigError("vocab_size", f"{self.vocab_size} leaves fewer than 2 stream symbols after {self.n_styles} style markers")
        if self.n_style_tokens > self.prefix_len:
            raise ConfigError("n_style_tokens", f"{self.n_style_tokens} exceeds prefix_len={self.prefix_len}")
        if self.prefix_len - 1 < self.transition_order:
            raise ConfigError("prefix_len", f"needs at least transition_order={self.transition_order} tokens after the marker")
        if self.branching > self.alphabet_size:
            raise ConfigError("branching", f"{self.branching} exceeds alphabet size {self.alphabet_size}")
        if not 0 <= self.noise <= 1:
            raise ConfigError("noise", f"must lie in [0, 1], got {self.noise}")
        if not self.concentration > 0:
            raise ConfigError("concentration", f"must be > 0, got {self.concentration}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    teacher_steps: int = 5000
    adapt_steps: int = 2000
    batch_size: int = 16
    teacher_lr: float = 1e-3
    adapt_lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    eval_interval: int = 250
    eval_batch_size: int = 64
    threads: int = gl.TORCH_THREADS

    def validate(self) -> TrainConfig:
        for name in ("batch_size", "eval_interval", "eval_batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("teacher_steps", "adapt_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        for name in ("teacher_lr", "adapt_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        return self


# --------------------------- ###  dataset ### ----------------------------


@dataclass
class TaskTables:
    """
    transitions: (n_styles, n_contexts, alphabet) next-symbol probabilities with noise mixed in.
    A context index packs the last `order` symbols, most recent least significant.
    codewords: (n_styles, n_style_tokens - 1) stream symbols following each style marker.
    """

    transitions: np.ndarray
    codewords: np.ndarray
    order: int

    @property
    def alphabet_size(self) -> int:
        return self.transitions.shape[-1]

    def context_index(self, history: np.ndarray) -> np.ndarray:
        ctx = np.zeros(history.shape[:-1], dtype=np.int64)
        for m in range(self.order):
            ctx = ctx * self.alphabet_size + history[..., -self.order + m]
        return ctx


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    tables: TaskTables
    train: np.ndarray
    valid: np.ndarray
    train_styles: np.ndarray
    valid_styles: np.ndarray

    def sample_batch(self, rng: Rng, batch_size: int) -> torch.Tensor:
        idx = rng.integers(0, len(self.train), size=batch_size)
        return torch.from_numpy(self.train[idx])

    def valid_batches(self, batch_size: int):
        for start in range(0, len(self.valid), batch_size):
            yield torch.from_numpy(self.valid[start : start + batch_size])


def build_tables(spec: SyntheticTaskSpec, rng: Rng) -> TaskTables:
    """
    This function draws the style codewords and the style-conditioned transition tables.
    Every (style, context) row gets `branching` distinct successors with Dirichlet weights,
    then uniform noise of weight `noise`.
    """
    a, c, s = spec.alphabet_size, spec.n_contexts, spec.n_styles
    table_rng = rng.child("tables")
    successors = np.argsort(table_rng.random((s, c, a)), axis=-1)[..., : spec.branching]
    weights = table_rng.dirichlet([spec.concentration] * spec.branching, size=(s, c))
    base = np.zeros((s, c, a))
    np.put_along_axis(base, successors, weights, axis=-1)
    transitions = (1.0 - spec.noise) * base + spec.noise / a
    transitions /= transitions.sum(axis=-1, keepdims=True)
    codewords = rng.child("codewords").integers(0, a, size=(s, spec.n_style_tokens - 1))
    return TaskTables(transitions=transitions, codewords=codewords, order=spec.transition_order)


def sample_sequences(
    spec: SyntheticTaskSpec, tables: TaskTables, styles: np.ndarray, rng: Rng
) -> np.ndarray:
    """
    This function samples full (prefix + generated) token sequences for the given styles

    Args:
        spec (SyntheticTaskSpec): task
        tables (TaskTables): codewords and transitions
        styles (np.ndarray): one style id per sequence
        rng (Rng): random stream

    Returns:
        np.ndarray: (len(styles), prefix_len + seq_len) int64 token ids
    """
    n, a = len(styles), spec.alphabet_size
    seqs = np.zeros((n, spec.total_len), dtype=np.int64)
    seqs[:, 0] = a + styles
    seqs[:, 1 : spec.n_style_tokens] = tables.codewords[styles]
    n_filler = spec.prefix_len - spec.n_style_tokens
    seqs[:, spec.n_style_tokens : spec.prefix_len] = rng.integers(0, a, size=(n, n_filler))
    ctx = tables.context_index(seqs[:, : spec.prefix_len])
    n_contexts = spec.n_contexts
    for t in range(spec.prefix_len, spec.total_len):
        cdf = np.cumsum(tables.transitions[styles, ctx], axis=-1)
        u = rng.random(n)[:, None] * cdf[:, -1:]
        nxt = np.minimum((cdf <= u).sum(axis=-1), a - 1)
        seqs[:, t] = nxt
        ctx = (ctx * a + nxt) % n_contexts
    return seqs


def generate_dataset(spec: SyntheticTaskSpec, rng: Rng) -> SyntheticDataset:
    """
    This function builds the task tables and a deterministic train/validation split

    Args:
        spec (SyntheticTaskSpec): task
        rng (Rng): random stream; the same (spec, seed) always gives the same dataset

    Returns:
        SyntheticDataset: train and validation sequences with their style ids
    """
    spec.validate()
    tables = build_tables(spec, rng)
    n_total = spec.n_train + spec.n_valid
    styles = np.arange(n_total) % spec.n_styles
    seqs = sample_sequences(spec, tables, styles, rng.child("sequences"))
    order = rng.child("split").permutation(n_total)
    train_idx, valid_idx = order[: spec.n_train], order[spec.n_train :]
    logger.info(f"generated {spec.n_train} train / {spec.n_valid} valid sequences of length {spec.total_len}")
    return SyntheticDataset(
        spec=spec,
        tables=tables,
        train=seqs[train_idx],
        valid=seqs[valid_idx],
        train_styles=styles[train_idx],
        valid_styles=styles[valid_idx],
    )


def entropy_rate(tables: TaskTables, iterations: int = 2000, tol: float = 1e-12) -> float:
    """
    This function returns the task's entropy rate in nats per generated token:
    the stationary-weighted conditional entropy of each style's chain, averaged over styles.
    The stationary distribution is found by power iteration of the lazy chain, which
    shares it and is aperiodic.

    Args:
        tables (TaskTables): transition tables
        iterations (int, optional): power-iteration cap. Defaults to 2000.
        tol (float, optional): L1 convergence threshold. Defaults to 1e-12.

    Returns:
        float: entropy rate
    """
    n_styles, n_contexts, a = tables.transitions.shape
    next_ctx = ((np.arange(n_contexts)[:, None] * a + np.arange(a)[None, :]) % n_contexts).ravel()
    rates = []
    for style in range(n_styles):
        probs = tables.transitions[style]
        pi = np.full(n_contexts, 1.0 / n_contexts)
        for _ in range(iterations):
            stepped = np.bincount(next_ctx, weights=(pi[:, None] * probs).ravel(), minlength=n_contexts)
            new_pi = 0.5 * (pi + stepped)
            converged = np.abs(new_pi - pi).sum() < tol
            pi = new_pi
            if converged:
                break
        rates.append(float(pi @ entr(probs).sum(axis=-1)))
    return float(np.mean(rates))


def unigram_nll(dataset: SyntheticDataset) -> float:
    """Validation NLL of the add-one smoothed unigram distribution of training targets."""
    p = dataset.spec.prefix_len
    counts = np.bincount(dataset.train[:, p:].ravel(), minlength=dataset.spec.vocab_size) + 1.0
    log_probs = np.log(counts / counts.sum())
    return float(-log_probs[dataset.valid[:, p:]].mean())


# --------------------------- ###  training and evaluation ### ----------------------------


@torch.no_grad()
def evaluate(
    model: DecoderModel, dataset: SyntheticDataset, mask: AdditiveMask, batch_size: int = 64
) -> Tuple[float, float]:
    """
    This function scores the validation split under a hard mask

    Args:
        model (DecoderModel): model to score
        dataset (SyntheticDataset): dataset
        mask (AdditiveMask): hard (0 / -inf) evaluation mask
        batch_size (int, optional): sequences per forward. Defaults to 64.

    Raises:
        ValueError: a soft mask was passed

    Returns:
        Tuple[float, float]: mean NLL per generated token and greedy token accuracy
    """
    if not mask.hard():
        raise ValueError("evaluation masks must be hard")
    model.eval()
    rows = generated_slice(mask.layout)
    nll_sum, correct, count = 0.0, 0, 0
    for batch in dataset.valid_batches(batch_size):
        logits = model(batch, mask).logits[:, rows]
        targets = batch[:, mask.layout.prefix_len :]
        nll_sum += float(F.cross_entropy(logits.double().flatten(0, 1), targets.flatten(), reduction="sum"))
        correct += int((logits.argmax(dim=-1) == targets).sum())
        count += targets.numel()
    return nll_sum / count, correct / count


@dataclass
class TeacherResult:
    model: DecoderModel
    dataset: SyntheticDataset
    log: pd.DataFrame
    valid_nll: float
    token_acc: float
    entropy_rate: float
    unigram_nll: float
    checkpoint: Optional[Path] = None


def _check_task_fits(spec: SyntheticTaskSpec, model_cfg: ModelConfig) -> None:
    if model_cfg.vocab_size < spec.vocab_size:
        raise ConfigError("vocab_size", f"model vocab {model_cfg.vocab_size} is smaller than task vocab {spec.vocab_size}")
    if spec.total_len > model_cfg.max_position:
        raise ConfigError("max_position", f"{model_cfg.max_position} is shorter than task sequences of {spec.total_len}")


def pretrain_teacher(
    spec: SyntheticTaskSpec,
    model_cfg: ModelConfig,
    steps: int,
    rng: Rng,
    train_cfg: TrainConfig = TrainConfig(),
    dataset: Optional[SyntheticDataset] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> TeacherResult:
    """
    This function trains the full-attention teacher on the synthetic task with cross-entropy

    Args:
        spec (SyntheticTaskSpec): task
        model_cfg (ModelConfig): teacher architecture
        steps (int): optimizer steps, >= 1
        rng (Rng): run stream; data, init and batch order use separate children
        train_cfg (TrainConfig, optional): optimizer and eval settings. Defaults to TrainConfig().
        dataset (Optional[SyntheticDataset], optional): prebuilt dataset. Defaults to generate_dataset(spec, rng.child("data")).
        checkpoint_path (Optional[Union[str, Path]], optional): where to persist the teacher. Defaults to None.
        log_path (Optional[Union[str, Path]], optional): CSV of step, train_loss, valid_nll, token_acc. Defaults to None.

    Raises:
        ConfigError: steps < 1 or a task that does not fit the model
        TrainingDivergedError: validation NLL rose for 3 consecutive evals, or a non-finite loss

    Returns:
        TeacherResult: model, dataset, eval log and reference entropies
    """
    if steps < 1:
        raise ConfigError("steps", f"must be >= 1, got {steps}")
    spec.validate()
    train_cfg.validate()
    _check_task_fits(spec, model_cfg)
    configure_torch(train_cfg.threads)
    dataset = dataset if dataset is not None else generate_dataset(spec, rng.child("data"))
    model = init_model(model_cfg, rng.child("teacher"))
    opt = make_optimizer(
        model,
        train_cfg.teacher_lr,
        steps,
        weight_decay=train_cfg.weight_decay,
        betas=(train_cfg.beta1, train_cfg.beta2),
        grad_clip=train_cfg.grad_clip,
    )
    layout = spec.layout
    mask = causal_full_mask(layout)
    rows = generated_slice(layout)
    batch_rng = rng.child("teacher-batches")

    history: List[dict] = []
    rises = 0
    train_loss = math.nan
    for step in range(1, steps + 1):
        model.train()
        batch = dataset.sample_batch(batch_rng, train_cfg.batch_size)
        loss = cross_entropy(model(batch, mask).logits[:, rows], batch[:, layout.prefix_len :])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at step {step}", pd.DataFrame(history))
        opt.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        opt.optimizer.step()
        opt.scheduler.step()
        train_loss = float(loss.detach())

        if step % train_cfg.eval_interval == 0 or step == steps:
            valid_nll, acc = evaluate(model, dataset, mask, train_cfg.eval_batch_size)
            if history and valid_nll > history[-1]["valid_nll"]:
                rises += 1
            else:
                rises = 0
            history.append({"step": step, "train_loss": train_loss, "valid_nll": valid_nll, "token_acc": acc})
            logger.info(f"pretrain step {step}/{steps}: train {train_loss:.4f}, valid nll {valid_nll:.4f}, acc {acc:.3f}")
            if rises >= 3:
                raise TrainingDivergedError(
                    f"validation NLL increased for {rises} consecutive evals", pd.DataFrame(history)
                )

    log = pd.DataFrame(history, columns=["step", "train_loss", "valid_nll", "token_acc"])
    if log_path is not None:
        log.to_csv(log_path, index=False)
    if checkpoint_path is not None:
        checkpoint_path = save_checkpoint(model, checkpoint_path)
    model.eval()
    return TeacherResult(
        model=model,
        dataset=dataset,
        log=log,
        valid_nll=float(log["valid_nll"].iloc[-1]),
        token_acc=float(log["token_acc"].iloc[-1]),
        entropy_rate=entropy_rate(dataset.tables),
        unigram_nll=unigram_nll(dataset),
        checkpoint=Path(checkpoint_path) if checkpoint_path is not None else None,
    )


@dataclass
class AdaptResult:
    student: DecoderModel
    loss_curve: pd.DataFrame
    final_nll: float
    token_acc: float
    steps: int
    checkpoint: Optional[Path] = None


def adapt_student(
    teacher: Union[DecoderModel, str, Path],
    sched: CurriculumSchedule,
    cfg: DistillConfig,
    steps: int,
    rng: Rng,
    dataset: SyntheticDataset,
    train_cfg: TrainConfig = TrainConfig(),
    checkpoint_path: Optional[Union[str, Path]] = None,
    loss_csv_path: Optional[Union[str, Path]] = None,
) -> AdaptResult:
    """
    This function adapts a copy of the teacher to the windowed mask.
    Before t_c the student trains under the soft curriculum mask, afterwards under the
    hard hybrid mask at w_target. Evaluation always uses the hard mask at w_target.
    steps = 0 only evaluates the truncated teacher.

    Args:
        teacher (Union[DecoderModel, str, Path]): teacher model or checkpoint path
        sched (CurriculumSchedule): curriculum
        cfg (DistillConfig): loss weights
        steps (int): adaptation steps, >= 0
        rng (Rng): adaptation stream (batch order)
        dataset (SyntheticDataset): the teacher's dataset
        train_cfg (TrainConfig, optional): optimizer and eval settings. Defaults to TrainConfig().
        checkpoint_path (Optional[Union[str, Path]], optional): where to persist the student. Defaults to None.
        loss_csv_path (Optional[Union[str, Path]], optional): loss curve CSV. Defaults to None.

    Returns:
        AdaptResult: student, loss curve, windowed validation NLL and accuracy
    """
    if steps < 0:
        raise ConfigError("steps", f"must be >= 0, got {steps}")
    sched.validate()
    cfg.validate()
    train_cfg.validate()
    configure_torch(train_cfg.threads)
    if not isinstance(teacher, DecoderModel):
        teacher = load_checkpoint(teacher)
    _check_task_fits(dataset.spec, teacher.config)
    teacher.eval()
    teacher.requires_grad_(False)
    student = copy.deepcopy(teacher)
    student.requires_grad_(True)

    layout = dataset.spec.layout
    teacher_mask = causal_full_mask(layout)
    eval_mask = hybrid_mask(layout, WindowSpec.bounded(sched.w_target))
    opt = make_optimizer(
        student,
        train_cfg.adapt_lr,
        steps,
        weight_decay=train_cfg.weight_decay,
        betas=(train_cfg.beta1, train_cfg.beta2),
        grad_clip=train_cfg.grad_clip,
    )
    batch_rng = rng.child("adapt-batches")
    rows: List[dict] = []
    for t in range(steps):
        batch = dataset.sample_batch(batch_rng, train_cfg.batch_size)
        hard = sched.is_hard(t)
        w_t = sched.w_target if hard else window_at(t, sched)
        tau_t = math.inf if hard else tau_at(t, sched)
        report, student = teacher_student_step(
            teacher,
            student,
            batch,
            sched.mask_for_step(layout, t),
            cfg,
            opt,
            teacher_mask=teacher_mask,
            window=w_t,
            tau=tau_t,
        )
        rows.append(report.as_row())
        if not math.isfinite(report.total):
            raise TrainingDivergedError(f"non-finite adaptation loss at step {t}", pd.DataFrame(rows))
        if (t + 1) % train_cfg.eval_interval == 0:
            logger.info(f"adapt step {t + 1}/{steps}: total {report.total:.4f} ce {report.ce:.4f} kl {report.kl:.4f} W {w_t} tau {tau_t:.3g}")

    final_nll, acc = evaluate(student, dataset, eval_mask, train_cfg.eval_batch_size)
    loss_curve = pd.DataFrame(rows, columns=gl.LOSS_CURVE_COLUMNS)
    if loss_csv_path is not None:
        loss_curve.to_csv(loss_csv_path, index=False)
    if checkpoint_path is not None:
        checkpoint_path = save_checkpoint(student, checkpoint_path)
    logger.info(f"adapted {steps} steps: windowed nll {final_nll:.4f}, acc {acc:.3f}")
    return AdaptResult(
        student=student,
        loss_curve=loss_curve,
        final_nll=final_nll,
        token_acc=acc,
        steps=steps,
        checkpoint=Path(checkpoint_path) if checkpoint_path is not None else None,
    )


# --------------------------- ###  ablations ### ----------------------------

# (enable_ce, enable_kl) per arm; sw-only runs no adaptation
ARM_LOSSES = {
    "sw-only": None,
    "ce-only": (True, False),
    "kl-only": (False, True),
    "ce+kl": (True, True),
}


@dataclass(frozen=True)
class AblationGrid:
    arms: Tuple[str, ...]
    strategies: Tuple[str, ...]
    seeds: Tuple[int, ...]

    @classmethod
    def named(cls, name: str) -> AblationGrid:
        if name not in gl.ABLATION_GRIDS:
            raise ConfigError("grid", f"unknown grid '{name}', choose from {sorted(gl.ABLATION_GRIDS)}")
        grid = gl.ABLATION_GRIDS[name]
        return cls(tuple(grid["arms"]), tuple(grid["strategies"]), tuple(grid["seeds"])).validate()

    def validate(self) -> AblationGrid:
        for arm in self.arms:
            if arm not in ARM_LOSSES:
                raise ConfigError("arms", f"unknown arm '{arm}'")
        for strategy in self.strategies:
            if strategy not in gl.ABLATION_STRATEGIES:
                raise ConfigError("strategies", f"unknown strategy '{strategy}'")
        return self

    def cells(self) -> List[Tuple[str, str, int]]:
        return [(a, s, seed) for a in self.arms for s in self.strategies for seed in self.seeds]


@dataclass
class ExperimentReport:
    arm: str
    strategy: str
    seed: int
    final_nll: float
    token_acc: float
    steps: int
    schedule: str = ""
    enable_ce: bool = False
    enable_kl: bool = False
    status: str = "ok"


@dataclass(frozen=True)
class AblationSetup:
    """Everything an arm needs besides its (arm, strategy, seed) cell; picklable for worker processes."""

    teacher_ckpt: str
    spec: SyntheticTaskSpec
    data_seed: int
    sched: CurriculumSchedule
    distill: DistillConfig
    train: TrainConfig


@functools.lru_cache(maxsize=4)
def _cached_dataset(spec: SyntheticTaskSpec, data_seed: int) -> SyntheticDataset:
    return generate_dataset(spec, Rng(data_seed).child("data"))


def run_arm(cell: Tuple[str, str, int], setup: AblationSetup) -> ExperimentReport:
    """
    This function runs one ablation cell; any failure is logged and returned as a failed row

    Args:
        cell (Tuple[str, str, int]): (arm, strategy, seed)
        setup (AblationSetup): shared teacher, data and hyperparameters

    Returns:
        ExperimentReport: one report row
    """
    arm, strategy, seed = cell
    sched = replace(setup.sched, direct=(strategy == "direct"))
    losses = ARM_LOSSES[arm]
    distill = setup.distill
    if losses is not None:
        distill = replace(distill, enable_ce=losses[0], enable_kl=losses[1])
    steps = 0 if losses is None else setup.train.adapt_steps
    schedule = f"direct W={sched.w_target}" if sched.direct else f"curriculum W={sched.w_start}->{sched.w_target} t_c={sched.t_c}"
    try:
        logging.info(f"ablation arm {arm}/{strategy}/seed {seed} starting")
        dataset = _cached_dataset(setup.spec, setup.data_seed)
        result = adapt_student(
            setup.teacher_ckpt, sched, distill, steps, Rng(seed).child("adapt"), dataset, setup.train
        )
        return ExperimentReport(
            arm, strategy, seed, result.final_nll, result.token_acc, steps, schedule,
            distill.enable_ce and losses is not None, distill.enable_kl and losses is not None,
        )
    except KeyboardInterrupt:
        raise
    except Exception as e:
        logging.exception(
            f"ablation:: arm {arm}/{strategy}/seed {seed} failed :: {e}",
            stack_info=False,
            exc_info=True,
        )
        return ExperimentReport(arm, strategy, seed, math.nan, math.nan, steps, schedule, status="failed")


def run_ablations(grid: AblationGrid, setup: AblationSetup, jobs: int = 1) -> pd.DataFrame:
    """
    This function runs every cell of the grid against the same teacher and data

    Args:
        grid (AblationGrid): arms x strategies x seeds
        setup (AblationSetup): shared teacher, data and hyperparameters
        jobs (int, optional): worker processes; 1 runs in-process. Defaults to 1.

    Returns:
        pd.DataFrame: one row per cell in grid order, ExperimentReport fields as columns
    """
    grid.validate()
    cells = grid.cells()
    worker = partial(run_arm, setup=setup)
    if jobs > 1:
        with Pool(min(jobs, len(cells))) as pool:
            reports = list(pool.imap_unordered(worker, cells))
    else:
        reports = [worker(cell) for cell in cells]
    position = {cell: i for i, cell in enumerate(cells)}
    reports.sort(key=lambda r: position[(r.arm, r.strategy, r.seed)])
    table = pd.DataFrame([asdict(r) for r in reports])
    n_failed = int((table["status"] != "ok").sum())
    logging.info(f"ablation finished: {len(table)} rows, {n_failed} failed")
    return table


def summarize_ablations(table: pd.DataFrame) -> Tuple[pd.DataFrame, Dict[str, Optional[bool]]]:
    """
    This function aggregates ablation rows per (arm, strategy) and evaluates the directional checks.
    The checks are reported, not enforced.

    Args:
        table (pd.DataFrame): run_ablations output

    Returns:
        Tuple[pd.DataFrame, Dict[str, Optional[bool]]]: mean/std NLL and accuracy per (arm, strategy),
        and {"ce_kl_best": ..., "curriculum_beats_direct": ..., "adapted_beats_sw_only": ...}; None when a side is missing
    """
    ok = table[table["status"] == "ok"]
    summary = (
        ok.groupby(["arm", "strategy"], sort=False)
        .agg(
            mean_nll=("final_nll", "mean"),
            std_nll=("final_nll", "std"),
            mean_acc=("token_acc", "mean"),
            n=("final_nll", "count"),
        )
        .reset_index()
    )
    by_arm = ok.groupby("arm")["final_nll"].mean()
    trained = ok[ok["arm"] != "sw-only"]
    by_strategy = trained.groupby("strategy")["final_nll"].mean()

    def _le(a: Optional[float], others: Sequence[Optional[float]]) -> Optional[bool]:
        others = [o for o in others if o is not None and not math.isnan(o)]
        if a is None or math.isnan(a) or not others:
            return None
        return bool(all(a <= o for o in others))

    directional = {
        "ce_kl_best": _le(by_arm.get("ce+kl"), [by_arm.get("ce-only"), by_arm.get("kl-only")]),
        "curriculum_beats_direct": _le(by_strategy.get("curriculum"), [by_strategy.get("direct")]),
        "adapted_beats_sw_only": _le(by_arm.get("ce+kl"), [by_arm.get("sw-only")]),
    }
    return summary, directional
