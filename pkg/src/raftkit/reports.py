"""Figure-ready report frames derived from a replay ledger.

Each builder returns plain row dicts (one CSV row each) so the data can
be exported, rendered, or fed to another plotting stack unchanged.
"""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from .core import Dataset, MissingDataError, N_LEADS
from .cycle import CycleLedger, run_comparison
from .verify import (
    CaseTable,
    LEAD_BANDS,
    ScoreSlice,
    aggregate,
    pit_histogram,
    rank_histogram,
    season_of_month,
    skill_score,
    station_scatter,
)

FIGURES = ("fig7", "fig8", "fig9", "fig10", "fig11", "fig12", "table1")


def lead_rmse_frame(table: CaseTable, spec: ScoreSlice = ScoreSlice()):
    """Per-lead RMSE of the issued and the adjusted means (fig7/fig9)."""
    sub = table.filter(spec)
    if sub.n == 0:
        raise MissingDataError(f"empty slice: {spec.label()}")
    rows = []
    lead = sub.column("lead")
    y = sub.column("obs")
    emos = sub.column("emos_mu")
    raft = sub.column("raft_mu")
    for l in range(1, N_LEADS + 1):
        m = lead == l
        if not m.any():
            continue
        rows.append(
            {
                "lead": l,
                "n": int(m.sum()),
                "rmse_emos": float(np.sqrt(np.mean((emos[m] - y[m]) ** 2))),
                "rmse_raft": float(np.sqrt(np.mean((raft[m] - y[m]) ** 2))),
            }
        )
    return rows


def run_comparison_frame(ledger: CycleLedger, dataset: Dataset,
                         n_resamples: int = 1000, seed: int = 0):
    """Time-of-day RMSE of the four daily runs with bootstrap CIs (fig8)."""
    return run_comparison(ledger, dataset, n_resamples=n_resamples, seed=seed)


def scatter_frame(table: CaseTable):
    """Per-station adjusted-vs-issued RMSE and CRPS points (fig10)."""
    rmse_rows = {r["station"]: r for r in station_scatter(table, "rmse")}
    crps_rows = {r["station"]: r for r in station_scatter(table, "crps")}
    rows = []
    for station in sorted(rmse_rows):
        r, c = rmse_rows[station], crps_rows[station]
        rows.append(
            {
                "station": station,
                "site_type": r["site_type"],
                "n": r["n"],
                "emos_rmse": r["emos_rmse"],
                "raft_rmse": r["raft_rmse"],
                "emos_crps": c["emos_crps"],
                "raft_crps": c["raft_crps"],
            }
        )
    return rows


def histogram_frame(table: CaseTable, pit_bins: int = 20, seed: int = 0):
    """Rank/PIT histograms by site type (fig11).

    Three methods per site type: the raw ensemble rank histogram, the
    post-processed PIT and the PIT of the adjusted mean combined with
    the post-processed variance.
    """
    rows = []
    rng = np.random.default_rng(seed)
    site_types = sorted(set(table.column("site_type")))
    for site in site_types:
        sub = table.filter(ScoreSlice(site_types=(site,)))
        hists = {
            "raw_rank": rank_histogram(sub.members, sub.column("obs"), rng=rng),
            "emos_pit": pit_histogram(
                sub.column("emos_mu"), sub.column("sigma2"), sub.column("obs"),
                bins=pit_bins,
            ),
            "raft_pit": pit_histogram(
                sub.column("raft_mu"), sub.column("sigma2"), sub.column("obs"),
                bins=pit_bins,
            ),
        }
        for method, hist in hists.items():
            for b, count in enumerate(hist.counts, start=1):
                rows.append(
                    {
                        "site_type": site,
                        "method": method,
                        "bin": b,
                        "bins": hist.counts.size,
                        "count": int(count),
                        "n": hist.n,
                    }
                )
    return rows


def seasonal_skill_frame(table: CaseTable):
    """RMSE skill of the adjusted mean over the issued mean, by season
    and time of day (fig12)."""
    rows = []
    months = table.column("month")
    seasons = np.asarray([season_of_month(m) for m in months])
    tod = table.column("time_of_day")
    y = table.column("obs")
    emos = table.column("emos_mu")
    raft = table.column("raft_mu")
    for season in ("DJF", "MAM", "JJA", "SON"):
        for hour in range(24):
            m = (seasons == season) & (tod == hour)
            if m.sum() < 2:
                continue
            rmse_emos = float(np.sqrt(np.mean((emos[m] - y[m]) ** 2)))
            rmse_raft = float(np.sqrt(np.mean((raft[m] - y[m]) ** 2)))
            rows.append(
                {
                    "season": season,
                    "time_of_day": hour,
                    "n": int(m.sum()),
                    "rmse_emos": rmse_emos,
                    "rmse_raft": rmse_raft,
                    "skill": skill_score(rmse_raft, rmse_emos),
                }
            )
    return rows


def score_table_frame(table: CaseTable, sources: Sequence[str] = ("raw", "emos")):
    """CRPS and RMSE per lead-time band for each forecast source (table1)."""
    rows = []
    for source in sources:
        for lo, hi in LEAD_BANDS:
            spec = ScoreSlice(lead_range=(lo, hi))
            crps_rep = aggregate(table, spec, metric="crps", source=source)
            rmse_rep = aggregate(table, spec, metric="rmse", source=source)
            rows.append(
                {
                    "source": source,
                    "lead_band": f"{lo}-{hi}",
                    "n": crps_rep.n,
                    "crps": crps_rep.value,
                    "rmse": rmse_rep.value,
                }
            )
    return rows


def build_figure_frame(
    name: str,
    table: CaseTable,
    ledger: CycleLedger,
    dataset: Dataset,
    spec: ScoreSlice = ScoreSlice(),
    seed: int = 0,
):
    if name in ("fig7", "fig9"):
        return lead_rmse_frame(table, spec)
    if name == "fig8":
        return run_comparison_frame(ledger, dataset, seed=seed)
    if name == "fig10":
        return scatter_frame(table.filter(spec))
    if name == "fig11":
        return histogram_frame(table.filter(spec), seed=seed)
    if name == "fig12":
        return seasonal_skill_frame(table.filter(spec))
    if name == "table1":
        return score_table_frame(table.filter(spec))
    raise ValueError(f"unknown figure {name!r}; choose from {FIGURES}")


def write_frame_csv(rows, path: str):
    if not rows:
        raise MissingDataError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = {}
            for key, value in row.items():
                if isinstance(value, float):
                    out[key] = repr(value)
                else:
                    out[key] = value
            writer.writerow(out)
