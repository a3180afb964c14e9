"""Matplotlib figures for fit reports, written straight to files.

Figures are built on :class:`matplotlib.figure.Figure` directly so no GUI
backend is ever touched. SVG output is made reproducible by dropping the
date stamp and fixing the hash salt used for element ids.
"""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib
from matplotlib.figure import Figure

import numpy as np

COLORS = {"S": "#1f77b4", "E": "#ff7f0e", "I": "#d62728", "Z": "#2ca02c", "R": "#9467bd"}

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "seizfit",
    "svg.fonttype": "none",
}


def _window(times, n: Optional[int]):
    return len(times) if n is None else min(int(n), len(times))


def draw_fit(ax, times, fitted, observed, window=None):
    """Observed cumulative counts against the model's Infected curve."""
    n = _window(times, window)
    ax.plot(times[:n], observed[:n], "o", ms=2.5, color="0.3", label="observed", zorder=1)
    ax.plot(times[:n], fitted[:n], "-", lw=1.5, color=COLORS["I"], label="model I(t)", zorder=2)
    ax.set_xlabel("time (bins)")
    ax.set_ylabel("cumulative count")
    ax.set_title("Model fit to data")
    ax.legend(loc="lower right")


def draw_compartments(ax, times, states, names: Sequence[str], window=None):
    n = _window(times, window)
    for j, name in enumerate(names):
        ax.plot(times[:n], states[:n, j], lw=1.5, color=COLORS.get(name), label=name)
    ax.set_xlabel("time (bins)")
    ax.set_ylabel("users")
    ax.set_title("Compartments" if window is None else f"Compartments, first {n} bins")
    ax.legend(loc="center right")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")


def save_fit_svg(path, times, fitted, observed, window=None):
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(5, 3.5))
        draw_fit(fig.add_subplot(), np.asarray(times), np.asarray(fitted), np.asarray(observed), window)
        _save(fig, path)


def save_compartments_svg(path, times, states, names, window=None):
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(5, 3.5))
        draw_compartments(fig.add_subplot(), np.asarray(times), np.asarray(states), names, window)
        _save(fig, path)


def save_report_svg(path, times, fitted, observed, states, names, window=None):
    """Two panels side by side: fit against data, then every compartment."""
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(10, 3.5))
        ax_fit, ax_comp = fig.subplots(1, 2)
        times = np.asarray(times)
        draw_fit(ax_fit, times, np.asarray(fitted), np.asarray(observed), window)
        draw_compartments(ax_comp, times, np.asarray(states), names, window)
        fig.tight_layout()
        _save(fig, path)
