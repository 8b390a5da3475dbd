"""
The cli.py module is the entry point of hwattn. Each subcommand reads a run
config, applies flag overrides, writes its CSV reports into --out and prints a
short summary.

    hwattn pretrain --config toy.cfg --seed 7
    hwattn adapt --teacher results/teacher.ckpt --window 32
    hwattn generate --checkpoint results/student.ckpt --tokens 512 --window 32
    hwattn bench --tokens 2048 --window 32
    hwattn analyze --checkpoint results/teacher.ckpt --published
    hwattn cost --preset indextts-10s
    hwattn ablate --grid default --teacher results/teacher.ckpt --jobs 4
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from hwattn.adapt.distill import DistillConfig
from hwattn.adapt.harness import (
    AblationGrid,
    AblationSetup,
    TrainConfig,
    adapt_student,
    generate_dataset,
    pretrain_teacher,
    run_ablations,
    summarize_ablations,
)
from hwattn.adapt.schedule import CurriculumSchedule
from hwattn.analysis.attention_stats import attention_decomposition, published_stats
from hwattn.analysis.costmodel import cost_report, preset_report, published_summary
from hwattn.analysis.latency import latency_bench
from hwattn.engine.checkpoint import load_checkpoint
from hwattn.engine.decoding import generate
from hwattn.engine.kvcache import write_cache_trace
from hwattn.engine.masking import WindowSpec, causal_full_mask
from hwattn.engine.model import DecoderModel, SequenceLayout, init_model
from hwattn.engine.numerics import Rng, configure_torch
from hwattn.run import Global as gl
from hwattn.run.exceptions import ConfigError
from hwattn.run.run_config import RunConfig

logger = logging.getLogger(__name__)


# --------------------------- ###  shared helpers ### ----------------------------


def _require_file(path: Optional[str], key: str) -> Path:
    if path is None:
        raise ConfigError(key, "is required")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{key}: file not found: {path}")
    return path


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """
    This function reads the config file and applies --seed / --out

    Args:
        args (argparse.Namespace): parsed arguments

    Returns:
        RunConfig: resolved config
    """
    cfg = RunConfig().from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def setup_logging(out_dir: Path, command: str, level: str = "INFO") -> Path:
    log_path = out_dir / f"hwattn_{command}.log"
    logging.basicConfig(
        filename=log_path,
        level=getattr(logging, level.upper()),
        filemode="a",
        datefmt="%Y-%m-%d %H:%M:%S",
        format="%(asctime)s %(levelname)-8s %(message)s",
        force=True,
    )
    return log_path


def _data_rng(cfg: RunConfig) -> Rng:
    return Rng(cfg.seed).child("data")


def _window(text: str) -> WindowSpec:
    try:
        return WindowSpec.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _plot(args: argparse.Namespace, draw, source, out_dir: Path, name: str) -> None:
    if not args.plot:
        return
    from hwattn.visualization.charts import BenchCharts

    charts = BenchCharts()
    path = charts.save(getattr(charts, draw)(source), out_dir / name)
    print(f"plot: {path}")


# --------------------------- ###  commands ### ----------------------------


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    steps = args.steps if args.steps is not None else cfg.train.teacher_steps
    result = pretrain_teacher(
        cfg.task,
        cfg.model,
        steps,
        Rng(cfg.seed),
        cfg.train,
        checkpoint_path=out_dir / gl.TEACHER_CKPT,
        log_path=out_dir / gl.PRETRAIN_LOG_CSV,
    )
    print(f"teacher: {result.checkpoint}")
    print(
        f"valid nll {result.valid_nll:.4f} nats/token, token acc {result.token_acc:.3f} "
        f"(entropy rate {result.entropy_rate:.4f}, unigram {result.unigram_nll:.4f})"
    )
    return gl.EXIT_OK


def cmd_adapt(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    teacher_path = _require_file(args.teacher, "teacher")
    steps = args.steps if args.steps is not None else cfg.train.adapt_steps
    result = adapt_student(
        teacher_path,
        cfg.schedule,
        cfg.distill,
        steps,
        Rng(cfg.seed).child("adapt"),
        generate_dataset(cfg.task, _data_rng(cfg)),
        cfg.train,
        checkpoint_path=out_dir / gl.STUDENT_CKPT,
        loss_csv_path=out_dir / gl.LOSS_CURVE_CSV,
    )
    mode = "direct" if cfg.schedule.direct else f"curriculum {cfg.schedule.w_start}->{cfg.schedule.w_target} t_c={cfg.schedule.t_c}"
    print(f"student: {result.checkpoint} ({mode}, {steps} steps)")
    print(f"windowed valid nll {result.final_nll:.4f} nats/token, token acc {result.token_acc:.3f}")
    _plot(args, "plot_loss_curve", result.loss_curve, out_dir, "loss_curve.png")
    return gl.EXIT_OK


def _prefix_for(args: argparse.Namespace, cfg: RunConfig) -> List[int]:
    if args.prefix:
        return [int(t) for t in args.prefix.split(",") if t.strip()]
    dataset = generate_dataset(cfg.task, _data_rng(cfg))
    matches = np.flatnonzero(dataset.valid_styles == args.style % cfg.task.n_styles)
    return [int(t) for t in dataset.valid[matches[0], : cfg.task.prefix_len]]


def cmd_generate(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    prefix = _prefix_for(args, cfg)
    result = generate(
        model,
        prefix,
        args.tokens,
        window=args.window,
        rng=Rng(cfg.seed).child("generate"),
        temperature=args.temp,
        top_k=args.top_k,
    )
    pd.DataFrame({"index": range(1, len(result.tokens) + 1), "token": result.tokens}).to_csv(
        out_dir / gl.TOKENS_CSV, index=False
    )
    write_cache_trace(result.cache_trace.to_dict("records"), out_dir / gl.CACHE_TRACE_JSONL)
    print(" ".join(str(t) for t in result.tokens))
    if len(result.cache_trace):
        last = result.cache_trace.iloc[-1]
        print(
            f"window {result.window}: {len(result.tokens)} tokens, "
            f"{int(last['cached_positions'])} cached positions, {int(last['bytes'])} cache bytes"
        )
    return gl.EXIT_OK


def _bench_model(args: argparse.Namespace, cfg: RunConfig) -> DecoderModel:
    if args.checkpoint:
        return load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    return init_model(cfg.model, Rng(cfg.seed).child("bench-model"))


def cmd_bench(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    model = _bench_model(args, cfg)
    rng = Rng(cfg.seed).child("bench")
    prefix = rng.child("prefix").integers(0, model.config.vocab_size, size=cfg.task.prefix_len).tolist()
    variants = [WindowSpec.unbounded(), args.window]
    traces = [
        latency_bench(model, prefix, args.tokens, v, repeats=args.repeats, warmup=args.warmup, rng=rng)
        for v in variants
    ]
    table = pd.concat([t.to_frame() for t in traces], ignore_index=True)
    table.to_csv(out_dir / gl.LATENCY_TRACE_CSV, index=False)
    for t in traces:
        print(f"{t.variant}: slope {t.slope_s_per_token:.3e} s/token, intercept {t.intercept_s * 1e3:.3f} ms, p={t.p_value:.4f}")
    full, windowed = traces
    if full.slope_s_per_token > 0:
        print(f"windowed/full slope ratio {windowed.slope_s_per_token / full.slope_s_per_token:.3f}")
    _plot(args, "plot_latency", table, out_dir, "latency.png")
    return gl.EXIT_OK


def _weights_from_npz(path: Path) -> tuple:
    with np.load(path) as data:
        if "attention" not in data or "prefix_len" not in data:
            raise ConfigError("weights", f"{path} needs 'attention' and 'prefix_len' arrays")
        attention = data["attention"]
        prefix_len = int(data["prefix_len"])
    weights = [torch.from_numpy(np.ascontiguousarray(layer)) for layer in attention]
    total = int(attention.shape[-1])
    return weights, SequenceLayout(prefix_len=prefix_len, gen_len=total - prefix_len)


def _weights_from_checkpoint(path: Path, cfg: RunConfig, n_sequences: int) -> tuple:
    model = load_checkpoint(path)
    dataset = generate_dataset(cfg.task, _data_rng(cfg))
    layout = cfg.task.layout
    batch = torch.from_numpy(dataset.valid[:n_sequences])
    with torch.no_grad():
        out = model(batch, causal_full_mask(layout), capture_attention=True)
    return out.attention_weights, layout


def cmd_analyze(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    window = args.window if args.window is not None else cfg.schedule.w_target
    rows = []
    if args.weights:
        weights, layout = _weights_from_npz(_require_file(args.weights, "weights"))
        rows.append(attention_decomposition(weights, layout, window).as_row(Path(args.weights).stem))
    if args.checkpoint:
        weights, layout = _weights_from_checkpoint(_require_file(args.checkpoint, "checkpoint"), cfg, args.n_sequences)
        rows.append(attention_decomposition(weights, layout, window).as_row(Path(args.checkpoint).stem))
    if args.published:
        rows.extend(published_stats(name).as_row(f"published:{name}") for name in gl.PUBLISHED_ATTENTION)
    if not rows:
        raise ConfigError("checkpoint", "give --checkpoint, --weights or --published")
    table = pd.DataFrame(rows, columns=gl.ATTENTION_STATS_COLUMNS)
    table.to_csv(out_dir / gl.ATTENTION_STATS_CSV, index=False)
    for row in table.itertuples(index=False):
        print(
            f"{row.source}: W={row.window_used} prompt {row.prompt_mass:.1f}% generated {row.generated_mass:.1f}% "
            f"local/gen {row.local_w_over_gen:.1f}% coverage {row.coverage:.1f}"
        )
    _plot(args, "plot_attention_stats", table, out_dir, "attention_stats.png")
    return gl.EXIT_OK


def cmd_cost(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    if args.preset:
        name = args.preset
        published = published_summary(name)
        print(
            f"{name} published: full {published['full_kv_mb']:.2f} MB, windowed {published['windowed_kv_mb']:.2f} MB, "
            f"reduction {published['reduction_pct']:.1f}%, speedup {published['speedup']:.2f}x "
            f"(implied prefix {published['implied_prefix_len']:.1f} tokens)"
        )
        report = preset_report(name)
        label = f"{name} modelled (proxy config, not the published model)"
    else:
        label = "config modelled"
        report = cost_report(
            cfg.model,
            args.prefix_len if args.prefix_len is not None else cfg.task.prefix_len,
            args.gen_len if args.gen_len is not None else cfg.task.seq_len,
            args.window if args.window is not None else WindowSpec.bounded(cfg.schedule.w_target),
        )
    summary = report.summary()
    report.steps.to_csv(out_dir / gl.COST_REPORT_CSV, index=False)
    print(
        f"{label}: prefix {summary['prefix_len']}, {summary['gen_len']} tokens, W={summary['window']}: "
        f"full {summary['full_kv_mb']:.2f} MB, windowed {summary['windowed_kv_mb']:.2f} MB, "
        f"reduction {summary['reduction_pct']:.1f}%, FLOPs speedup {summary['flops_speedup']:.2f}x"
    )
    return gl.EXIT_OK


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    grid = AblationGrid.named(args.grid)
    if args.teacher:
        teacher_path = _require_file(args.teacher, "teacher")
    else:
        logger.info("ablate: no --teacher given, pretraining one")
        teacher_path = pretrain_teacher(
            cfg.task,
            cfg.model,
            cfg.train.teacher_steps,
            Rng(cfg.seed),
            cfg.train,
            checkpoint_path=out_dir / gl.TEACHER_CKPT,
            log_path=out_dir / gl.PRETRAIN_LOG_CSV,
        ).checkpoint
    setup = AblationSetup(
        teacher_ckpt=str(teacher_path),
        spec=cfg.task,
        data_seed=cfg.seed,
        sched=cfg.schedule,
        distill=cfg.distill,
        train=cfg.train,
    )
    table = run_ablations(grid, setup, jobs=args.jobs)
    table.to_csv(out_dir / gl.ABLATION_REPORT_CSV, index=False)
    summary, directional = summarize_ablations(table)
    summary.to_csv(out_dir / gl.ABLATION_SUMMARY_CSV, index=False)
    print(summary.to_string(index=False))
    for check, outcome in directional.items():
        print(f"{check}: {'n/a' if outcome is None else outcome}")
    _plot(args, "plot_ablation", table[table["status"] == "ok"], out_dir, "ablation.png")
    return gl.EXIT_OK


# --------------------------- ###  argument parsing ### ----------------------------


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """
    Defaults help that leaves None-sentinel flags alone; their help names the config default instead.
    """

    def _get_help_string(self, action: argparse.Action) -> str:
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _config_default(value) -> str:
    return f"(config default: {value})"


def build_parser() -> argparse.ArgumentParser:
    run, schedule, distill, train = RunConfig(), CurriculumSchedule(), DistillConfig(), TrainConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(gl.DEFAULT_CONFIG), type=str, help="Run config file (.cfg)")
    common.add_argument("--seed", default=None, type=int, help=f"Run seed; overrides [run] seed {_config_default(run.seed)}")
    common.add_argument(
        "--out", default=None, type=str, help=f"Output directory; overrides [run] out_dir {_config_default(run.out_dir)}"
    )
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Log file level"
    )
    common.add_argument("--plot", action="store_true", help="Also write PNG charts next to the CSVs")

    parser = argparse.ArgumentParser(
        formatter_class=HelpFormatter,
        prog="hwattn",
        description="""Hybrid windowed-attention decoding: teacher pretraining, windowed adaptation, decoding and cost reports""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, formatter_class=HelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "Train the full-attention teacher on the synthetic task")
    p.add_argument(
        "--steps", default=None, type=int,
        help=f"Optimizer steps; overrides [train] teacher_steps {_config_default(train.teacher_steps)}",
    )

    p = add("adapt", cmd_adapt, "Adapt a windowed student from a teacher checkpoint")
    p.add_argument("--teacher", default=None, type=str, help="Teacher checkpoint (required)")
    p.add_argument(
        "--steps", default=None, type=int,
        help=f"Adaptation steps; overrides [train] adapt_steps {_config_default(train.adapt_steps)}",
    )
    p.add_argument(
        "--window", default=None, type=int,
        help=f"Target window W; overrides [schedule] w_target {_config_default(schedule.w_target)}",
    )
    p.add_argument(
        "--window-start", default=None, type=int,
        help=f"Initial window; overrides [schedule] w_start {_config_default(schedule.w_start)}",
    )
    p.add_argument(
        "--tau-start", default=None, type=float,
        help=f"Initial mask penalty; overrides [schedule] tau_start {_config_default(schedule.tau_start)}",
    )
    p.add_argument(
        "--tau-end", default=None, type=float,
        help=f"Final mask penalty; overrides [schedule] tau_end {_config_default(schedule.tau_end)}",
    )
    p.add_argument(
        "--tc", default=None, type=int,
        help=f"Curriculum length in steps; overrides [schedule] t_c {_config_default(schedule.t_c)}",
    )
    p.add_argument(
        "--lambda", dest="lam", default=None, type=float,
        help=f"KL weight; overrides [distill] lam {_config_default(distill.lam)}",
    )
    p.add_argument(
        "--skew", default=None, type=float,
        help=f"Skew of the teacher/student mixture; overrides [distill] skew {_config_default(distill.skew)}",
    )
    p.add_argument("--no-ce", action="store_true", help="Drop the cross-entropy term")
    p.add_argument("--no-kl", action="store_true", help="Drop the distillation term")
    p.add_argument("--direct", action="store_true", help="Hard target window from step 0")

    p = add("generate", cmd_generate, "Decode tokens from a checkpoint over the hybrid cache")
    p.add_argument("--checkpoint", default=None, type=str, help="Model checkpoint")
    p.add_argument("--tokens", default=256, type=int, help="Tokens to generate")
    p.add_argument("--window", default=WindowSpec.unbounded(), type=_window, help="Window W or 'inf'")
    p.add_argument("--temp", default=0.0, type=float, help="Sampling temperature; 0 is greedy")
    p.add_argument("--top-k", default=0, type=int, help="Top-k filter; 0 keeps all tokens")
    p.add_argument("--style", default=0, type=int, help="Style whose first validation prefix conditions decoding")
    p.add_argument("--prefix", default=None, type=str, help="Comma-separated prefix token ids; overrides --style")

    p = add("bench", cmd_bench, "Per-step decode latency, full vs windowed")
    p.add_argument("--checkpoint", default=None, type=str, help="Model checkpoint; default is a fresh model from the config")
    p.add_argument("--tokens", default=2048, type=int, help="Tokens per repeat")
    p.add_argument("--window", default=WindowSpec.bounded(32), type=_window, help="Window of the windowed variant")
    p.add_argument("--repeats", default=3, type=int, help="Repeats per variant; the median step time is kept")
    p.add_argument("--warmup", default=gl.LATENCY_WARMUP_STEPS, type=int, help="Leading steps dropped")

    p = add("analyze", cmd_analyze, "Attention mass decomposition and coverage")
    p.add_argument("--checkpoint", default=None, type=str, help="Checkpoint to capture full-attention weights from")
    p.add_argument("--weights", default=None, type=str, help="npz with 'attention' [L,H,T,T] and 'prefix_len'")
    p.add_argument("--window", default=None, type=int, help="Window whose local share is measured; default [schedule] w_target")
    p.add_argument("--n-sequences", default=8, type=int, help="Validation sequences captured from --checkpoint")
    p.add_argument("--published", action="store_true", help="Add the published decomposition rows")

    p = add("cost", cmd_cost, "Analytical KV-cache and FLOPs comparison")
    p.add_argument("--preset", default=None, choices=sorted(gl.PRESETS), help="Published baseline preset")
    p.add_argument("--prefix-len", default=None, type=int, help="Prefix length; default [task] prefix_len")
    p.add_argument("--gen-len", default=None, type=int, help="Generated tokens; default [task] seq_len")
    p.add_argument("--window", default=None, type=_window, help="Window; default [schedule] w_target")

    p = add("ablate", cmd_ablate, "Loss-component x strategy x seed ablation grid")
    p.add_argument("--grid", default="default", choices=sorted(gl.ABLATION_GRIDS), help="Named grid")
    p.add_argument("--teacher", default=None, type=str, help="Teacher checkpoint; pretrained into --out when omitted")
    p.add_argument(
        "--steps", default=None, type=int,
        help=f"Adaptation steps per arm; overrides [train] adapt_steps {_config_default(train.adapt_steps)}",
    )
    p.add_argument("--jobs", default=1, type=int, help="Worker processes")
    return parser


_CONFIG_FLAGS = ("func", "config", "seed", "out", "log_level")


def apply_overrides(args: argparse.Namespace, cfg: RunConfig) -> RunConfig:
    """
    This function folds command flags into the config; unset flags leave config values alone.
    The command and its flags are recorded in cfg.options

    Args:
        args (argparse.Namespace): parsed arguments
        cfg (RunConfig): config read from file

    Raises:
        ConfigError: an override produces an invalid section

    Returns:
        RunConfig: updated config
    """
    if args.command == "adapt":
        cfg.override(
            "schedule",
            w_target=args.window,
            w_start=args.window_start,
            tau_start=args.tau_start,
            tau_end=args.tau_end,
            t_c=args.tc,
            direct=True if args.direct else None,
        )
        cfg.override(
            "distill",
            lam=args.lam,
            skew=args.skew,
            enable_ce=False if args.no_ce else None,
            enable_kl=False if args.no_kl else None,
        )
    if args.command == "ablate" and args.steps is not None:
        cfg.override("train", adapt_steps=args.steps)
    cfg.options = {
        key: str(value) for key, value in sorted(vars(args).items()) if key not in _CONFIG_FLAGS and value is not None
    }
    return cfg.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = apply_overrides(args, load_run_config(args))
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (ConfigError, FileNotFoundError) as e:
        print(f"hwattn {args.command}: {e}", file=sys.stderr)
        return gl.EXIT_USAGE

    setup_logging(out_dir, args.command, args.log_level)
    logging.info(f"hwattn {args.command} seed {cfg.seed} config {args.config}")
    configure_torch(cfg.train.threads)
    cfg.to_file(out_dir / gl.RUN_CONFIG_FILE)
    try:
        code = args.func(args, cfg, out_dir)
    except (ConfigError, FileNotFoundError) as e:
        logging.error(f"{args.command}:: {e}")
        print(f"hwattn {args.command}: {e}", file=sys.stderr)
        return gl.EXIT_USAGE
    except Exception as e:
        logging.exception(f"{args.command}:: {e}", stack_info=False, exc_info=True)
        print(f"hwattn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return gl.EXIT_RUNTIME
    logging.info(f"hwattn {args.command} finished")
    return code


if __name__ == "__main__":
    sys.exit(main())
