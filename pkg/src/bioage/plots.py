"""Figures for the report bundle; file output only (Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import SurvivalCurves, fit_ba_ca_line  # noqa: E402

COLORS = {"healthy": "tab:green", "average": "tab:blue", "unhealthy": "tab:red"}


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps re-emitted files byte-identical
    fig.savefig(path, metadata={"Software": None}, dpi=100)
    plt.close(fig)


def plot_ba_vs_ca(estimates: pd.DataFrame, path, title: str = "") -> None:
    a, b = fit_ba_ca_line(estimates)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(estimates["ca"], estimates["ba"], s=3, alpha=0.3, color="tab:gray")
    lo, hi = estimates["ca"].min(), estimates["ca"].max()
    xs = np.array([lo, hi])
    ax.plot(xs, xs, "k--", lw=1, label="BA = CA")
    ax.plot(xs, a * xs + b, color="tab:red", lw=1.5, label=f"BA = {a:.2f} CA + {b:.1f}")
    ax.set_xlabel("chronological age [y]")
    ax.set_ylabel("biological age [y]")
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_survival(curves: SurvivalCurves, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for group, curve in curves.curves.items():
        f = curve.to_frame()
        ax.step(f["time"], f["survival"], where="post", color=COLORS.get(group), label=f"{group} (n={curve.n})")
    ax.set_xlabel("days")
    ax.set_ylabel("survival")
    if np.isfinite(curves.p_value):
        title = f"{title} log-rank p={curves.p_value:.2g}".strip()
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_binned_curves(binned: pd.DataFrame, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for state, part in binned.groupby("state", sort=True):
        color = COLORS.get(state)
        ax.plot(part["bin"], part["mean"], marker="o", ms=3, color=color, label=state)
        ax.fill_between(part["bin"], part["q_low"], part["q_high"], color=color, alpha=0.2)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xlabel("chronological age bin [y]")
    ax.set_ylabel("gap [y]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
