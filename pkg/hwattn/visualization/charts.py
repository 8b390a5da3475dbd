from pathlib import Path
from typing import List, Optional

import matplotlib
import matplotlib.figure
import pandas as pd
import seaborn as sns

from matplotlib import pyplot as plt


class BenchCharts:
    """
    This class takes hwattn CSV reports (latency traces, loss curves, attention stats,
    ablation tables) and draws the standard figures for each

    """

    palette = {"full": "#CD2626", "windowed": "#1874CD"}

    def __init__(self, style: str = "whitegrid", fontsize: int = 12) -> None:
        sns.set_style(style)
        self.fontsize = fontsize

    @staticmethod
    def _read(source) -> pd.DataFrame:
        if isinstance(source, pd.DataFrame):
            return source
        return pd.read_csv(source)

    def _color(self, variant: str) -> str:
        return self.palette["full"] if variant == "full" else self.palette["windowed"]

    def plot_latency(self, trace, title: str = "Per-step decode latency") -> matplotlib.figure.Figure:
        """
        This method plots per-step wall time against generated token index, one line per variant

        Args:
            trace (str | Path | pd.DataFrame): latency_trace.csv contents
            title (str, optional): figure title. Defaults to "Per-step decode latency".

        Returns:
            matplotlib.figure.Figure: latency figure
        """
        df = self._read(trace)
        fig, ax = plt.subplots(1, 1, figsize=(8, 5))
        for variant, group in df.groupby("variant", sort=False):
            ax.plot(
                group["token_index"],
                group["step_time_s"] * 1e3,
                label=variant,
                color=self._color(variant),
                linewidth=1.0,
            )
        ax.set_xlabel("Generated token index", fontsize=self.fontsize)
        ax.set_ylabel("Step time [ms]", fontsize=self.fontsize)
        ax.set_title(title, fontsize=self.fontsize + 2)
        ax.legend()
        fig.tight_layout()
        return fig

    def plot_loss_curve(self, loss_curve, title: str = "Adaptation losses") -> matplotlib.figure.Figure:
        """
        This method plots total / CE / KL losses with the window W(t) on a twin axis

        Args:
            loss_curve (str | Path | pd.DataFrame): loss_curve.csv contents
            title (str, optional): figure title. Defaults to "Adaptation losses".

        Returns:
            matplotlib.figure.Figure: loss figure
        """
        df = self._read(loss_curve)
        fig, ax = plt.subplots(1, 1, figsize=(8, 5))
        for col, color in (("total", "black"), ("ce", "#228B22"), ("kl", "#8B4513")):
            ax.plot(df["step"], df[col], label=col, color=color, linewidth=1.0)
        ax.set_xlabel("Step", fontsize=self.fontsize)
        ax.set_ylabel("Loss [nats]", fontsize=self.fontsize)
        twin = ax.twinx()
        twin.step(df["step"], df["window"], where="post", color="#6A5ACD", alpha=0.6, label="W(t)")
        twin.set_ylabel("Window W(t)", fontsize=self.fontsize)
        lines, labels = ax.get_legend_handles_labels()
        twin_lines, twin_labels = twin.get_legend_handles_labels()
        ax.legend(lines + twin_lines, labels + twin_labels, loc="upper right")
        ax.set_title(title, fontsize=self.fontsize + 2)
        fig.tight_layout()
        return fig

    def plot_attention_stats(self, stats, title: str = "Attention mass decomposition") -> matplotlib.figure.Figure:
        """
        This method draws stacked prompt / local-generated / distant-generated bars per source row

        Args:
            stats (str | Path | pd.DataFrame): attention_stats.csv contents
            title (str, optional): figure title. Defaults to "Attention mass decomposition".

        Returns:
            matplotlib.figure.Figure: bar figure with coverage markers
        """
        df = self._read(stats).copy()
        df["local"] = df["generated_mass"] * df["local_w_over_gen"] / 100.0
        df["distant"] = df["generated_mass"] - df["local"]
        fig, ax = plt.subplots(1, 1, figsize=(max(4, 2 * len(df) + 2), 5))
        df.set_index("source")[["prompt_mass", "local", "distant"]].plot.bar(
            stacked=True,
            ax=ax,
            color=["#4682B4", "#7EC0EE", "#CDC673"],
            width=0.7,
            alpha=0.9,
        )
        ax.scatter(range(len(df)), df["coverage"], color="red", marker="D", zorder=3, label="coverage")
        ax.set_ylabel("Attention mass [%]", fontsize=self.fontsize)
        ax.set_xlabel("")
        ax.set_ylim(0, 105)
        ax.legend(loc="lower right")
        ax.set_title(title, fontsize=self.fontsize + 2)
        fig.tight_layout()
        return fig

    def plot_ablation(self, table, title: str = "Windowed validation NLL by arm") -> matplotlib.figure.Figure:
        df = self._read(table)
        fig, ax = plt.subplots(1, 1, figsize=(8, 5))
        sns.barplot(data=df, x="arm", y="final_nll", hue="strategy", ax=ax, errorbar="sd")
        ax.set_ylabel("Final NLL [nats/token]", fontsize=self.fontsize)
        ax.set_title(title, fontsize=self.fontsize + 2)
        fig.tight_layout()
        return fig

    def save(self, fig: matplotlib.figure.Figure, path) -> Path:
        path = Path(path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
