"""SVG figures drawn from the tables of a finished pipeline run.

Plots read only the written artifacts, never in-memory results, so every
plotted number is also in a table.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from binfda.inference import CURVE_SETS  # noqa: E402
from binfda.pipeline import read_table, stage_dir  # noqa: E402

logger = logging.getLogger(__name__)

GROUP_COLORS = {"L": "tab:red", "C": "tab:blue"}
SET_COLORS = {"unaligned": "tab:gray", "aligned": "tab:green", "warps": "tab:purple"}
MODE_ROWS = ("joint", "phase", "amplitude")


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    return path


def _curves(folder: Path, name: str):
    header, rows = read_table(_require(folder / f"{name}.csv"))
    s = np.array(header[2:], dtype=float)
    labels = [r[1] for r in rows]
    values = np.array([r[2:] for r in rows], dtype=float)
    return s, labels, values


def _columns(path: Path) -> dict:
    header, rows = read_table(_require(path))
    cols = list(zip(*rows)) if rows else [()] * len(header)
    return {h: c for h, c in zip(header, cols)}


def plot_samples(folder: Path):
    """Four panels: unaligned logit, aligned logit, warps, CLR warps."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 7), sharex=True)
    panels = (("unaligned_logit", "Unaligned log-odds"), ("aligned_logit", "Aligned log-odds"),
              ("warps", "Warping functions"), ("warp_clr", "CLR of warps"))
    for ax, (name, title) in zip(axes.flat, panels):
        s, labels, values = _curves(folder, name)
        for lab, row in zip(labels, values):
            ax.plot(s, row, color=GROUP_COLORS.get(lab, "k"), lw=0.8, alpha=0.7)
        ax.set_title(title)
    for lab, color in GROUP_COLORS.items():
        axes[0, 0].plot([], [], color=color, label=lab)
    axes[0, 0].legend(loc="best", fontsize=8)
    for ax in axes[1]:
        ax.set_xlabel("normalized trial")
    fig.tight_layout()
    return fig


def plot_modes(folder: Path):
    """Joint / phase / amplitude rows by component columns, PVE in the titles."""
    cols = _columns(folder / "modes.csv")
    eig = _columns(folder / "eigenvalues.csv")
    pve = [float(p) if p not in ("nan", "") else float("nan") for p in eig["pve"]]
    s = np.array(cols["s"], dtype=float)
    ks = sorted({int(h.split("_")[0][1:]) for h in cols if h.startswith("k")})
    fig, axes = plt.subplots(len(MODE_ROWS), len(ks), figsize=(4 * len(ks), 9), squeeze=False,
                             sharex=True, sharey=True)
    for j, k in enumerate(ks):
        mean = np.array(cols[f"k{k}_overall_mean_prob"], dtype=float)
        for i, row in enumerate(MODE_ROWS):
            ax = axes[i, j]
            ax.plot(s, mean, color="k", lw=1.5, label="mean")
            ax.plot(s, np.array(cols[f"k{k}_{row}_minus"], dtype=float), color="tab:blue",
                    ls="--", label="-2 sd")
            ax.plot(s, np.array(cols[f"k{k}_{row}_plus"], dtype=float), color="tab:red",
                    ls="--", label="+2 sd")
            ax.set_title(f"{row} mode, component {k} (PVE {100 * pve[k - 1]:.1f}%)", fontsize=9)
            if j == 0:
                ax.set_ylabel("success probability")
    axes[0, 0].legend(fontsize=7)
    for ax in axes[-1]:
        ax.set_xlabel("normalized trial")
    fig.tight_layout()
    return fig


def plot_pvalues(folder: Path, alpha: float = 0.05):
    """Adjusted (solid) and unadjusted (dashed) p-value functions of all curve sets."""
    cols = _columns(folder / "pvalue_functions.csv")
    s = np.array(cols["s"], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in CURVE_SETS:
        color = SET_COLORS[k]
        ax.plot(s, np.array(cols[f"{k}_adjusted"], dtype=float), color=color, ls="-",
                label=f"{k} (adjusted)")
        ax.plot(s, np.array(cols[f"{k}_unadjusted"], dtype=float), color=color, ls="--",
                label=f"{k} (unadjusted)")
    ax.axhline(alpha, color="k", lw=0.8, ls=":", label="_alpha")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("normalized trial")
    ax.set_ylabel("p-value")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    return fig


def plot_histograms(folder: Path):
    """Permutation distributions of T with the observed value marked."""
    perm = _columns(folder / "permutation_statistics.csv")
    obs = _columns(folder / "global_tests.csv")
    observed = dict(zip(obs["curve_set"], (float(t) for t in obs["T_observed"])))
    pvals = dict(zip(obs["curve_set"], (float(p) for p in obs["p_value"])))
    fig, axes = plt.subplots(1, len(CURVE_SETS), figsize=(12, 3.5))
    for ax, k in zip(axes, CURVE_SETS):
        ax.hist(np.array(perm[k], dtype=float), bins=40, color=SET_COLORS[k], alpha=0.7)
        ax.axvline(observed[k], color="k", lw=1.5, label="_observed")
        ax.set_title(f"{k}: p = {pvals[k]:.3f}")
        ax.set_xlabel("T")
    fig.tight_layout()
    return fig


PLOTS = {"samples.svg": plot_samples, "modes.svg": plot_modes, "pvalues.svg": plot_pvalues,
         "permutation_histograms.svg": plot_histograms}


def render_plots(out) -> list:
    """Write the four figures for every completed stage; returns the paths."""
    out = Path(out)
    manifest = json.loads(_require(out / "manifest.json").read_text())
    alpha = manifest["config"]["alpha"]
    written = []
    with plt.rc_context({"svg.hashsalt": "binfda", "svg.fonttype": "none"}):
        for delay, info in sorted(manifest["stages"].items(), key=lambda kv: int(kv[0])):
            if info.get("status") != "ok":
                continue
            folder = stage_dir(out, int(delay))
            for name, builder in PLOTS.items():
                fig = builder(folder, alpha) if builder is plot_pvalues else builder(folder)
                path = folder / name
                fig.savefig(path, format="svg", metadata={"Date": None})
                plt.close(fig)
                written.append(path)
    return written
