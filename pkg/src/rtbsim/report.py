"""Figure rendering for simulation and fitting reports.

Figures are written as PNG next to the delimited output. Rendering is
byte-deterministic: fixed style, fixed dpi, and stripped writer metadata,
so repeated runs with the same inputs produce identical files.
"""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KWARGS = {"dpi": 110, "metadata": {"Software": None}}


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def plot_slot_spend(slot_spend: Mapping[str, Sequence[float]], path: str) -> str:
    """Per-slot spend lines, one per campaign."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(slot_spend):
        ax.plot(range(len(slot_spend[name])), slot_spend[name], marker="o", ms=3, label=name)
    ax.set_xlabel("time slot")
    ax.set_ylabel("spend (ticks)")
    ax.set_title("Spend per slot")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def plot_cumulative_spend(slot_spend: Mapping[str, Sequence[float]], path: str) -> str:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(slot_spend):
        series = slot_spend[name]
        cum = []
        total = 0.0
        for s in series:
            total += s
            cum.append(total)
        ax.plot(range(len(cum)), cum, label=name)
    ax.set_xlabel("time slot")
    ax.set_ylabel("cumulative spend (ticks)")
    ax.set_title("Budget consumption")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def plot_win_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path: str) -> str:
    """Win probability against bid for one or more estimators."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        xs = [b for b, _ in curves[name]]
        ys = [w for _, w in curves[name]]
        ax.step(xs, ys, where="post", label=name)
    ax.set_xlabel("bid (ticks)")
    ax.set_ylabel("win probability")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("Bid landscape")
    ax.legend(loc="best", fontsize=8)
    return _finish(fig, path)


def plot_loss_curve(losses: Sequence[float], path: str, ylabel: str = "training loss") -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title("Training diagnostics")
    return _finish(fig, path)


def plot_attribution(credits: Mapping[str, Mapping[str, float]], path: str) -> str:
    """Grouped bars: credit per channel for each attribution model."""
    fig, ax = plt.subplots(figsize=(7, 4))
    models = sorted(credits)
    channels = sorted({c for m in models for c in credits[m]})
    width = 0.8 / max(len(models), 1)
    for mi, model in enumerate(models):
        xs = [i + mi * width for i in range(len(channels))]
        ys = [credits[model].get(c, 0.0) for c in channels]
        ax.bar(xs, ys, width=width, label=model)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(channels))])
    ax.set_xticklabels(channels, fontsize=8)
    ax.set_ylabel("credit")
    ax.set_title("Attribution by model")
    ax.legend(fontsize=8)
    return _finish(fig, path)
