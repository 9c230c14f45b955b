"""CSV/JSON writers with fixed numeric formatting, and PNG figures rendered beside them."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FLOAT_DIGITS = 6


def fmt(value) -> str:
    """Locale-independent text for a CSV cell."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.{FLOAT_DIGITS}f}"
    if hasattr(value, "item"):          # numpy scalars
        return fmt(value.item())
    return str(value)


def _json_safe(value):
    if isinstance(value, Mapping):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return round(value, FLOAT_DIGITS)
    return value


def write_csv(path, rows: Iterable[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def training_curve(path, log_rows: Sequence[Mapping]) -> None:
    """Evaluation reward and training malfunction rate against episode."""
    evals = [r for r in log_rows if not math.isnan(r["mean_eval_reward"])]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["episode"] for r in evals], [r["mean_eval_reward"] for r in evals], marker="o", ms=3)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean evaluation reward")
    ax2 = ax.twinx()
    ax2.plot([r["episode"] for r in log_rows], [r["epsilon_malfunction"] for r in log_rows],
             color="tab:red", lw=1)
    ax2.set_ylabel("training malfunction rate", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def comparison_bars(path, rows: Sequence[Mapping],
                    metrics: Sequence[str] = ("utility", "throughput", "fairness", "delivery_ratio")
                    ) -> None:
    """One panel per metric with one bar per policy."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(3 * len(metrics), 3))
    names = [r["policy"] for r in rows]
    for ax, m in zip(axes, metrics):
        ax.bar(names, [r[m] for r in rows], color="tab:blue")
        ax.set_title(m)
        ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def sweep_plot(path, rows: Sequence[Mapping]) -> None:
    """Mean utility against threshold, one line per learning factor."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for g in sorted({r["gamma_lf"] for r in rows}):
        sel = sorted((r for r in rows if r["gamma_lf"] == g), key=lambda r: r["u_th"])
        ax.plot([r["u_th"] for r in sel], [r["mean_utility"] for r in sel], marker="o",
                label=f"learning factor {g:g}")
    ax.set_xlabel("utility threshold")
    ax.set_ylabel("mean utility")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
