"""Matplotlib figure rendering for the report paths.

Every CLI command that writes delimited output also drops a figure next to
it: per-city metric bars for evaluation, loss curves for training, round
traces for federation, and a scatter for clustering.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_city_metrics(report, path) -> None:
    cities = sorted(report.per_city)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(cities) + 2.0), 3.2))
    if cities:
        xs = np.arange(len(cities))
        ades = [report.per_city[c]["ade"] for c in cities]
        fdes = [report.per_city[c]["fde"] for c in cities]
        ax.bar(xs - 0.2, ades, width=0.4, label="ADE")
        ax.bar(xs + 0.2, fdes, width=0.4, label="FDE")
        ax.axhline(report.balanced_ade, color="C0", ls="--", lw=1,
                   label="balanced ADE")
        ax.set_xticks(xs)
        ax.set_xticklabels(cities, rotation=30, ha="right")
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no cities evaluated", ha="center", va="center")
    ax.set_ylabel("meters")
    ax.set_title("displacement error by city")
    _save(fig, path)


def render_loss_trace(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    if rows:
        iters = [r[0] for r in rows]
        ax.plot(iters, [r[2] for r in rows], label="total", lw=1)
        ax.plot(iters, [r[3] for r in rows], label="behavior cloning", lw=1)
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    _save(fig, path)


def render_round_trace(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    if rows:
        rounds = [r[0] for r in rows]
        mean_losses = [float(np.mean(r[1])) for r in rows]
        ax.plot(rounds, mean_losses, label="mean local loss", lw=1)
        vals = [(r[0], r[2]) for r in rows if r[2] is not None]
        if vals:
            ax2 = ax.twinx()
            ax2.plot([v[0] for v in vals], [v[1] for v in vals], "C1",
                     label="balanced val ADE", lw=1)
            ax2.set_ylabel("ADE (m)")
        ax.legend(fontsize=8, loc="upper right")
    ax.set_xlabel("round")
    ax.set_ylabel("loss")
    ax.set_title("federated training")
    _save(fig, path)


def render_clusters(points, assignments, centroids, path) -> None:
    pts = np.asarray(points, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    ax.scatter(pts[:, 0], pts[:, 1], c=assignments, s=8, cmap="tab10")
    ax.scatter(centroids[:, 0], centroids[:, 1], marker="x", c="black", s=60)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("k-means clusters")
    _save(fig, path)
