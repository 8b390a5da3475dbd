"""
Global constants
Stores paths to bundled resources, output file names, exit codes and the reference numbers used throughout the code base
"""

from pathlib import Path
import os

# --------------------------- ###  directories and files ### ----------------------------

#  ## resources

# ./hwattn/resources
HWATTN_RESOURCES = Path(os.path.abspath(__file__)).parents[1] / "resources"
CONFIGS_DIR = HWATTN_RESOURCES / "configs"
DEFAULT_CONFIG = CONFIGS_DIR / "toy.cfg"

#  ## outputs

TEACHER_CKPT = "teacher.ckpt"
STUDENT_CKPT = "student.ckpt"
RUN_CONFIG_FILE = "run_config.cfg"
PRETRAIN_LOG_CSV = "pretrain_log.csv"
LOSS_CURVE_CSV = "loss_curve.csv"
ABLATION_REPORT_CSV = "ablation_report.csv"
ABLATION_SUMMARY_CSV = "ablation_summary.csv"
ATTENTION_STATS_CSV = "attention_stats.csv"
COST_REPORT_CSV = "cost_report.csv"
LATENCY_TRACE_CSV = "latency_trace.csv"
CACHE_TRACE_JSONL = "cache_trace.jsonl"
TOKENS_CSV = "tokens.csv"

ABLATION_REPORT_COLUMNS = ["arm", "strategy", "seed", "final_nll", "token_acc", "steps"]
LOSS_CURVE_COLUMNS = ["step", "total", "ce", "kl", "window", "tau", "lr"]
LATENCY_TRACE_COLUMNS = ["variant", "token_index", "step_time_s", "visible_len"]
ATTENTION_STATS_COLUMNS = [
    "source",
    "window_used",
    "prompt_mass",
    "generated_mass",
    "local_w_over_gen",
    "coverage",
    "n_queries",
]

# --------------------------- ###  process ### ----------------------------

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

# single intra-op thread keeps float reductions identical run to run
TORCH_THREADS = 1

# --------------------------- ###  numerics ### ----------------------------

FP32_BYTES = 4
BYTES_PER_MB = 1024**2

CHECKPOINT_MAGIC = b"WANDCKPT"
CHECKPOINT_VERSION = 1

INIT_STD = 0.02

# --------------------------- ###  experiment defaults ### ----------------------------

LATENCY_WARMUP_STEPS = 32
LATENCY_MIN_TICKS = 10
PERMUTATION_RESAMPLES = 999

ABLATION_ARMS = ["sw-only", "ce-only", "kl-only", "ce+kl"]
ABLATION_STRATEGIES = ["direct", "curriculum"]

ABLATION_GRIDS = {
    "default": {"arms": ABLATION_ARMS, "strategies": ABLATION_STRATEGIES, "seeds": [0, 1, 2]},
    "smoke": {"arms": ["sw-only", "ce+kl"], "strategies": ABLATION_STRATEGIES, "seeds": [0]},
}

# --------------------------- ###  presets ### ----------------------------

# Prefix lengths are solved from the published full/windowed KV MB pairs.
# Model configs are 0.5B-class proxies; only the reduction percentages are checked against published values.
PRESETS = {
    "cosyvoice2-10s": {
        "prefix_len": 187,
        "token_rate_hz": 25,
        "seconds": 10,
        "window": 32,
        "model": {
            "n_layers": 24,
            "d_model": 896,
            "n_q_heads": 14,
            "n_kv_heads": 2,
            "d_ff": 4864,
            "vocab_size": 6564,
            "max_position": 32768,
        },
    },
    "indextts-10s": {
        "prefix_len": 80,
        "token_rate_hz": 25,
        "seconds": 10,
        "window": 32,
        "model": {
            "n_layers": 24,
            "d_model": 1280,
            "n_q_heads": 20,
            "n_kv_heads": 20,
            "d_ff": 5120,
            "vocab_size": 8194,
            "max_position": 8192,
        },
    },
    "sparktts-10s": {
        "prefix_len": 221,
        "token_rate_hz": 50,
        "seconds": 10,
        "window": 64,
        "model": {
            "n_layers": 24,
            "d_model": 896,
            "n_q_heads": 14,
            "n_kv_heads": 2,
            "d_ff": 4864,
            "vocab_size": 166000,
            "max_position": 32768,
        },
    },
}

# published KV MB (full, windowed) and cumulative GFLOPs (full, windowed) for 10 s of audio
PUBLISHED_COST = {
    "cosyvoice2-10s": {"kv_mb": (10.48, 5.25), "gflops": (11.55, 7.44), "reduction_pct": 49.9, "speedup": 1.55},
    "indextts-10s": {"kv_mb": (38.44, 13.01), "gflops": (6.18, 3.28), "reduction_pct": 66.2, "speedup": 1.89},
    "sparktts-10s": {"kv_mb": (18.09, 7.15), "gflops": (48.12, 31.74), "reduction_pct": 60.5, "speedup": 1.51},
}

# published attention decomposition (prompt %, generated %, local/gen %, coverage %)
PUBLISHED_ATTENTION = {
    "cosyvoice2-10s": {"prompt": 58.5, "generated": 41.5, "local_over_gen": 70.2, "coverage": 87.6},
    "indextts-10s": {"prompt": 64.6, "generated": 35.4, "local_over_gen": 57.1, "coverage": 84.8},
    "sparktts-10s": {"prompt": 47.9, "generated": 52.1, "local_over_gen": 82.8, "coverage": 91.0},
}


def get_preset(name: str) -> dict:
    """
    This is a getter for a preset by name

    Args:
        name (str): preset name, one of PRESETS

    Raises:
        KeyError: unknown preset name

    Returns:
        preset (dict): preset dictionary
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset '{name}', choose from {sorted(PRESETS)}")
    return PRESETS[name]


def preset_gen_len(name: str) -> int:
    preset = get_preset(name)
    return int(preset["token_rate_hz"] * preset["seconds"])


def bytes_to_mb(n_bytes: float) -> float:
    return n_bytes / BYTES_PER_MB
