"""Figures for the report, drawn from the delimited study outputs.

PNG metadata is stripped so a regenerated report is byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scales import DOMAINS, DOMAIN_NAMES  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def similarity_figure(panels: Mapping[str, Sequence[dict]], path: Path) -> None:
    keys = ["overall", *DOMAINS]
    fig, axes = plt.subplots(2, 3, figsize=(13, 8))
    for ax, key in zip(axes.flat, keys):
        rows = panels[key]
        names = [r["test"] for r in rows]
        m = np.array([[float(r[n]) for n in names] for r in rows])
        off = m[~np.eye(len(names), dtype=bool)]
        ax.imshow(m, cmap="viridis", vmin=off.min(), vmax=off.max())
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
        ax.set_yticks(range(len(names)), names, fontsize=8)
        for i in range(len(names)):
            for j in range(len(names)):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7, color="white")
        ax.set_title("Overall average" if key == "overall" else DOMAIN_NAMES[key])
    fig.tight_layout()
    _save(fig, path)


def tsne_figure(points: Sequence[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 7))
    tests = sorted({p["test"] for p in points})
    markers = dict(zip(tests, "osD^v<>"))
    colors = dict(zip(DOMAINS, plt.get_cmap("tab10").colors))
    for t in tests:
        for d in DOMAINS:
            sel = [p for p in points if p["test"] == t and p["domain"] == d]
            if sel:
                ax.scatter([float(p["x"]) for p in sel], [float(p["y"]) for p in sel],
                           marker=markers[t], color=colors[d], s=22, label=f"{t} {d}")
    ax.legend(fontsize=6, ncol=2, loc="best")
    ax.set_xlabel("t-SNE 1")
    ax.set_ylabel("t-SNE 2")
    fig.tight_layout()
    _save(fig, path)


def convergent_figure(rows: Sequence[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(DOMAINS))
    for k, r in enumerate(rows):
        ax.bar(x + k * width, [float(r[d]) for d in DOMAINS], width, label=r["format"])
    ax.set_xticks(x + width * (len(rows) - 1) / 2, [DOMAIN_NAMES[d] for d in DOMAINS])
    ax.set_ylim(0, 1)
    ax.set_ylabel("convergent r")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def regression_figure(rows: Sequence[dict], path: Path) -> None:
    outcomes = list(dict.fromkeys(r["outcome"] for r in rows if r["outcome"].endswith("_mean")))
    fig, axes = plt.subplots(1, len(outcomes), figsize=(5 * len(outcomes), 4), squeeze=False)
    for ax, o in zip(axes[0], outcomes):
        sub = {r["predictor"]: r for r in rows if r["outcome"] == o}
        betas = [float(sub[d]["beta"]) for d in DOMAINS]
        ses = [float(sub[d]["se"]) for d in DOMAINS]
        ax.bar(range(len(DOMAINS)), betas, yerr=[1.96 * s for s in ses], color="tab:blue")
        for k, d in enumerate(DOMAINS):
            if sub[d]["significant"] == "1":
                ax.text(k, betas[k], "*", ha="center", va="bottom" if betas[k] >= 0 else "top")
        ax.axhline(0, color="black", lw=0.8)
        ax.set_xticks(range(len(DOMAINS)), list(DOMAINS))
        ax.set_title(o)
    fig.tight_layout()
    _save(fig, path)
