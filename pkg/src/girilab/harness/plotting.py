"""Learning-curve figures from metrics CSVs.

Curves in a group are aligned on the steps they share; the figure shows the
mean true return with a band of one sample standard deviation (ddof=1) and
optional horizontal reference lines for the demonstration and the expert.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS_HEADER = ("step", "update", "mean_intrinsic_reward", "mean_true_return",
                  "loss_recon", "loss_kl", "loss_policy", "seed")


class MetricsParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_metrics(path) -> dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays (empty cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise MetricsParseError(f"expected header {','.join(METRICS_HEADER)}", 1)
    cols: list[list[float]] = [[] for _ in METRICS_HEADER]
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise MetricsParseError(f"expected {len(METRICS_HEADER)} fields, got {len(row)}", lineno)
        for j, cell in enumerate(row):
            try:
                cols[j].append(float(cell) if cell != "" else float("nan"))
            except ValueError:
                raise MetricsParseError(f"field {METRICS_HEADER[j]} is not a number: {cell!r}", lineno) from None
    return {name: np.asarray(c) for name, c in zip(METRICS_HEADER, cols)}


@dataclass
class Curve:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n: int

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.std


def aggregate(runs: list[dict[str, np.ndarray]], column: str = "mean_true_return") -> Curve:
    """Mean and sample std across runs at every step present in all of them."""
    if not runs:
        raise ValueError("no runs to aggregate")
    common = runs[0]["step"]
    for r in runs[1:]:
        common = np.intersect1d(common, r["step"])
    common = np.unique(common)
    stack = []
    for r in runs:
        pos = {s: i for i, s in enumerate(r["step"])}
        stack.append([r[column][pos[s]] for s in common])
    data = np.asarray(stack, dtype=np.float64).reshape(len(runs), len(common))
    std = data.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(len(common))
    return Curve(common, data.mean(axis=0), std, len(runs))


def plot_curves(groups: dict[str, list], out, demo_return: float | None = None,
                expert_return: float | None = None, title: str | None = None) -> dict[str, Curve]:
    """Render one mean line and std band per group into an SVG file."""
    curves = {label: aggregate([read_metrics(p) for p in paths]) for label, paths in groups.items()}
    with plt.rc_context({"svg.hashsalt": "girilab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, c in curves.items():
            (line,) = ax.plot(c.steps, c.mean, label=f"{label} (n={c.n})")
            ax.fill_between(c.steps, c.lower, c.upper, color=line.get_color(), alpha=0.25, linewidth=0)
        if demo_return is not None:
            ax.axhline(demo_return, color="0.3", linestyle="--", linewidth=1, label="demonstration")
        if expert_return is not None:
            ax.axhline(expert_return, color="0.3", linestyle=":", linewidth=1, label="expert")
        ax.set_xlabel("simulation steps")
        ax.set_ylabel("average return")
        if title:
            ax.set_title(title)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return curves
