"""Render report frames to PNG files.

Rendering is kept apart from scoring so the delimited outputs stay the
primary artifact; every plot here is drawn from the same rows that land
in the CSV next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METADATA = {"Software": "raftkit"}

_SITE_COLORS = {"coastal": "tab:blue", "inland": "tab:green", "mountain": "tab:red"}


def save(fig, path: str):
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)


def render_lead_rmse(rows, path: str, title="RMSE by lead time"):
    leads = [r["lead"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(leads, [r["rmse_emos"] for r in rows], "-", color="black", label="EMOS")
    ax.plot(leads, [r["rmse_raft"] for r in rows], "--", color="tab:red", label="RAFT")
    ax.set_xlabel("lead time (h)")
    ax.set_ylabel("RMSE (°C)")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    save(fig, path)


def render_run_comparison(rows, path: str):
    fig, ax = plt.subplots(figsize=(8, 4))
    init_hours = sorted({r["init_hour"] for r in rows})
    for ih in init_hours:
        sub = sorted((r for r in rows if r["init_hour"] == ih),
                     key=lambda r: r["time_of_day"])
        tod = np.array([r["time_of_day"] for r in sub])
        mid = np.array([r["rmse"] for r in sub])
        lo = np.array([r["ci_low"] for r in sub])
        hi = np.array([r["ci_high"] for r in sub])
        order = np.argsort(tod)
        ax.plot(tod[order], mid[order], marker="o", ms=3, label=f"{ih:02d} UTC run")
        ax.fill_between(tod[order], lo[order], hi[order], alpha=0.15)
        ax.axvline(ih, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("time of day (UTC)")
    ax.set_ylabel("RMSE (°C)")
    ax.set_title("Run comparison by time of day (90% bootstrap CIs)")
    ax.legend(ncol=2, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    save(fig, path)


def render_scatter(rows, path: str):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, metric in zip(axes, ("rmse", "crps")):
        for row in rows:
            ax.plot(
                row[f"emos_{metric}"], row[f"raft_{metric}"], "o",
                color=_SITE_COLORS.get(row["site_type"], "gray"), ms=5,
            )
        lims = ax.get_xlim() + ax.get_ylim()
        top = max(lims) if lims else 1.0
        ax.plot([0, top], [0, top], "-", color="black", lw=0.8)
        ax.set_xlabel(f"EMOS {metric.upper()}")
        ax.set_ylabel(f"RAFT {metric.upper()}")
        ax.grid(alpha=0.3)
    handles = [
        plt.Line2D([], [], marker="o", ls="", color=c, label=s)
        for s, c in _SITE_COLORS.items()
    ]
    axes[0].legend(handles=handles, fontsize=8)
    fig.suptitle("Per-station scores, RAFT vs EMOS")
    fig.tight_layout()
    save(fig, path)


def render_histograms(rows, path: str):
    sites = sorted({r["site_type"] for r in rows})
    methods = ("raw_rank", "emos_pit", "raft_pit")
    fig, axes = plt.subplots(
        len(methods), max(len(sites), 1), figsize=(3 * max(len(sites), 1), 6),
        squeeze=False,
    )
    for i, method in enumerate(methods):
        for j, site in enumerate(sites):
            sub = [r for r in rows if r["site_type"] == site and r["method"] == method]
            sub.sort(key=lambda r: r["bin"])
            counts = [r["count"] for r in sub]
            ax = axes[i][j]
            ax.bar(range(1, len(counts) + 1), counts, color="tab:gray")
            if counts:
                ax.axhline(np.mean(counts), color="tab:red", lw=0.8, ls="--")
            if i == 0:
                ax.set_title(site, fontsize=9)
            if j == 0:
                ax.set_ylabel(method, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.suptitle("Calibration histograms by site type")
    fig.tight_layout()
    save(fig, path)


def render_seasonal_skill(rows, path: str):
    fig, ax = plt.subplots(figsize=(8, 4))
    for season in ("DJF", "MAM", "JJA", "SON"):
        sub = sorted((r for r in rows if r["season"] == season),
                     key=lambda r: r["time_of_day"])
        if not sub:
            continue
        ax.plot(
            [r["time_of_day"] for r in sub], [r["skill"] for r in sub],
            marker="o", ms=3, label=season,
        )
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel("time of day (UTC)")
    ax.set_ylabel("RMSE skill score (RAFT vs EMOS)")
    ax.set_title("Seasonal skill by time of day")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    save(fig, path)


def render_score_table(rows, path: str):
    fig, ax = plt.subplots(figsize=(6, 1.2 + 0.4 * len(rows)))
    ax.axis("off")
    header = ["source", "lead band", "n", "CRPS", "RMSE"]
    cells = [
        [r["source"], r["lead_band"], str(r["n"]),
         f"{r['crps']:.3f}", f"{r['rmse']:.3f}"]
        for r in rows
    ]
    table = ax.table(cellText=cells, colLabels=header, loc="center")
    table.scale(1, 1.3)
    fig.tight_layout()
    save(fig, path)


_RENDERERS = {
    "fig7": render_lead_rmse,
    "fig8": render_run_comparison,
    "fig9": render_lead_rmse,
    "fig10": render_scatter,
    "fig11": render_histograms,
    "fig12": render_seasonal_skill,
    "table1": render_score_table,
}


def render(name: str, rows, path: str):
    try:
        renderer = _RENDERERS[name]
    except KeyError:
        raise ValueError(f"no renderer for {name!r}") from None
    renderer(rows, path)
