"""Verification machinery: scores, calibration checks and aggregation.

Scores operate on plain arrays and are pure; aggregation runs over a
flat case table built from a replay ledger, filtered by slices (station,
site type, init hour, lead band, season, time of day). Everything here
emits data, not plots; figure rendering lives one layer up.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core import Dataset, N_LEADS, N_MEMBERS, MissingDataError
from .emos import crps_gaussian

LEAD_BANDS = ((1, 12), (13, 24), (25, 36))
ENVELOPE_NOMINAL = (N_MEMBERS - 1) / (N_MEMBERS + 1)  # 11/13 for 12 members
SEASONS = ("DJF", "MAM", "JJA", "SON")


def season_of_month(month: int) -> str:
    """Meteorological season of a calendar month."""
    return {12: "DJF", 1: "DJF", 2: "DJF",
            3: "MAM", 4: "MAM", 5: "MAM",
            6: "JJA", 7: "JJA", 8: "JJA",
            9: "SON", 10: "SON", 11: "SON"}[month]


def rmse(mean_forecasts, observations) -> float:
    """Root-mean-square error of mean forecasts against observations."""
    pred = np.asarray(mean_forecasts, dtype=float)
    y = np.asarray(observations, dtype=float)
    if pred.size == 0:
        raise ValueError("rmse needs at least one case")
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def crps_ensemble(members, y):
    """CRPS of a discrete ensemble forecast.

        (1/m) sum_i |X_i - y|  -  (1/(2 m^2)) sum_i sum_j |X_i - X_j|

    `members` may be (m,) for one case or (n, m) for a batch.
    """
    x = np.asarray(members, dtype=float)
    obs = np.asarray(y, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        obs = np.atleast_1d(obs)
    m = x.shape[1]
    term1 = np.mean(np.abs(x - obs[:, None]), axis=1)
    term2 = np.mean(np.abs(x[:, :, None] - x[:, None, :]), axis=(1, 2)) / 2.0
    out = term1 - term2
    return float(out[0]) if single else out


def pit(mu, sigma2, y):
    """Probability integral transform of a Gaussian forecast: Phi(z)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be > 0")
    z = (np.asarray(y, float) - np.asarray(mu, float)) / np.sqrt(sigma2)
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def rank(members, y, rng: Optional[np.random.Generator] = None):
    """Rank of the observation among the members, 1..m+1.

    Ties are broken uniformly at random with the supplied generator, so
    a calibrated ensemble yields a flat rank histogram even with exactly
    repeated values.
    """
    x = np.asarray(members, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    obs = np.atleast_1d(np.asarray(y, dtype=float))
    below = np.sum(x < obs[:, None], axis=1)
    ties = np.sum(x == obs[:, None], axis=1)
    if np.any(ties):
        if rng is None:
            rng = np.random.default_rng(0)
        below = below + rng.integers(0, ties + 1)
    ranks = below + 1
    return int(ranks[0]) if single else ranks


@dataclass
class Histogram:
    """Binned calibration diagnostic; rank kind has exactly m+1 bins."""

    kind: str
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=int)
        if self.kind == "rank" and self.counts.size != N_MEMBERS + 1:
            raise ValueError(f"rank histogram needs {N_MEMBERS + 1} bins")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.n, 1)

    def shape_statistic(self) -> float:
        """Variance of bin frequencies around uniform; 0 iff flat.
        Grows as the histogram becomes U-shaped or skewed."""
        freq = self.frequencies()
        return float(np.mean((freq - 1.0 / freq.size) ** 2))


def rank_histogram(members, y, rng: Optional[np.random.Generator] = None) -> Histogram:
    ranks = rank(members, y, rng=rng)
    counts = np.bincount(np.asarray(ranks) - 1, minlength=N_MEMBERS + 1)
    return Histogram(kind="rank", counts=counts)


def pit_histogram(mu, sigma2, y, bins: int = 20) -> Histogram:
    values = np.atleast_1d(pit(mu, sigma2, y))
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return Histogram(kind="pit", counts=counts)


def coverage_gaussian(mu, sigma2, y, nominal: float) -> float:
    """Fraction of observations inside the central `nominal` interval."""
    mu = np.asarray(mu, float)
    sigma = np.sqrt(np.asarray(sigma2, float))
    y = np.asarray(y, float)
    half = ndtri(0.5 + nominal / 2.0)
    inside = (y >= mu - half * sigma) & (y <= mu + half * sigma)
    return float(np.mean(inside))


def coverage_envelope(members, y) -> float:
    """Fraction of observations inside the ensemble min/max envelope.

    For m exchangeable members the nominal coverage is (m-1)/(m+1),
    11/13 for a 12-member ensemble.
    """
    x = np.asarray(members, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = (y >= x.min(axis=1)) & (y <= x.max(axis=1))
    return float(np.mean(inside))


def skill_score(score_model: float, score_reference: float) -> float:
    """1 - model/reference; 1 is perfect, 0 no improvement."""
    if score_reference <= 0:
        raise ValueError("reference score must be > 0")
    return 1.0 - score_model / score_reference


def bootstrap_ci(
    case_scores,
    n_resamples: int = 1000,
    level: float = 0.90,
    rng: Optional[np.random.Generator] = None,
    statistic: Optional[Callable] = None,
):
    """Percentile bootstrap interval for a statistic of case scores.

    Parameters
    ----------
    case_scores : array_like, n >= 2 cases resampled with replacement
    statistic : callable(values, axis=...) -> stat, default mean

    Returns
    -------
    (low, center, high) with center the statistic on the full sample;
    deterministic for a fixed generator.
    """
    scores = np.asarray(case_scores, dtype=float)
    if scores.size < 2:
        raise ValueError("bootstrap needs at least 2 cases")
    if rng is None:
        rng = np.random.default_rng(0)
    if statistic is None:
        statistic = np.mean
    idx = rng.integers(0, scores.size, size=(n_resamples, scores.size))
    stats = statistic(scores[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    center = float(statistic(scores, axis=None))
    return float(low), center, float(high)


@dataclass(frozen=True)
class ScoreSlice:
    """Case filter for aggregation; None fields do not constrain."""

    stations: Optional[tuple[str, ...]] = None
    site_types: Optional[tuple[str, ...]] = None
    init_hours: Optional[tuple[int, ...]] = None
    lead_range: Optional[tuple[int, int]] = None
    seasons: Optional[tuple[str, ...]] = None
    times_of_day: Optional[tuple[int, ...]] = None

    def label(self) -> str:
        parts = []
        if self.stations:
            parts.append("station=" + "+".join(self.stations))
        if self.site_types:
            parts.append("site_type=" + "+".join(self.site_types))
        if self.init_hours:
            parts.append("init_hour=" + "+".join(map(str, self.init_hours)))
        if self.lead_range:
            parts.append(f"leads={self.lead_range[0]}-{self.lead_range[1]}")
        if self.seasons:
            parts.append("season=" + "+".join(self.seasons))
        if self.times_of_day:
            parts.append("tod=" + "+".join(map(str, self.times_of_day)))
        return ",".join(parts) if parts else "all"


@dataclass
class VerificationReport:
    """One aggregated score with the provenance of its slice."""

    metric: str
    source: str
    slice_label: str
    n: int
    value: float
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


class CaseTable:
    """Flat arrays of verification cases: one row per (station, cycle,
    lead) with an observation. Carries the raw members alongside the
    post-processed and adjusted means so raw/EMOS/RAFT can be scored on
    identical cases."""

    FIELDS = (
        "station", "site_type", "init_hour", "date_ord", "lead",
        "time_of_day", "month", "obs", "emos_mu", "sigma2", "raft_mu",
    )

    def __init__(self, columns: dict, members: np.ndarray):
        self.columns = columns
        self.members = members

    @property
    def n(self) -> int:
        return int(self.columns["obs"].size)

    def __len__(self):
        return self.n

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def mask(self, spec: ScoreSlice) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        c = self.columns
        if spec.stations:
            m &= np.isin(c["station"], np.asarray(spec.stations))
        if spec.site_types:
            m &= np.isin(c["site_type"], np.asarray(spec.site_types))
        if spec.init_hours:
            m &= np.isin(c["init_hour"], np.asarray(spec.init_hours))
        if spec.lead_range:
            m &= (c["lead"] >= spec.lead_range[0]) & (c["lead"] <= spec.lead_range[1])
        if spec.seasons:
            seasons = np.asarray([season_of_month(mo) for mo in c["month"]])
            m &= np.isin(seasons, np.asarray(spec.seasons))
        if spec.times_of_day:
            m &= np.isin(c["time_of_day"], np.asarray(spec.times_of_day))
        return m

    def filter(self, spec: ScoreSlice) -> "CaseTable":
        m = self.mask(spec)
        return CaseTable(
            {k: v[m] for k, v in self.columns.items()}, self.members[m]
        )


def build_case_table(ledger, dataset: Dataset) -> CaseTable:
    """Assemble the case table from a replay ledger.

    The adjusted column holds each lead's final (most short-term)
    forecast; under an issue-only policy it equals the issued mean.
    """
    cols = {name: [] for name in CaseTable.FIELDS}
    members_rows = []
    for rec in ledger.sorted_records():
        t0 = rec.cycle.init_instant
        fc = dataset.forecasts.get((rec.station, rec.cycle))
        site = dataset.stations[rec.station].site_type.value
        month = rec.cycle.date.month
        date_ord = rec.cycle.date.toordinal()
        for lead in range(1, N_LEADS + 1):
            y = dataset.observation(rec.station, t0 + lead)
            if y is None:
                continue
            cols["station"].append(rec.station)
            cols["site_type"].append(site)
            cols["init_hour"].append(rec.cycle.init_hour)
            cols["date_ord"].append(date_ord)
            cols["lead"].append(lead)
            cols["time_of_day"].append((rec.cycle.init_hour + lead) % 24)
            cols["month"].append(month)
            cols["obs"].append(y)
            cols["emos_mu"].append(rec.base_mu[lead - 1])
            cols["sigma2"].append(rec.sigma2[lead - 1])
            cols["raft_mu"].append(rec.final_mu[lead - 1])
            members_rows.append(fc.members[:, lead - 1])
    columns = {
        "station": np.asarray(cols["station"], dtype=object),
        "site_type": np.asarray(cols["site_type"], dtype=object),
        "init_hour": np.asarray(cols["init_hour"], dtype=int),
        "date_ord": np.asarray(cols["date_ord"], dtype=int),
        "lead": np.asarray(cols["lead"], dtype=int),
        "time_of_day": np.asarray(cols["time_of_day"], dtype=int),
        "month": np.asarray(cols["month"], dtype=int),
        "obs": np.asarray(cols["obs"], dtype=float),
        "emos_mu": np.asarray(cols["emos_mu"], dtype=float),
        "sigma2": np.asarray(cols["sigma2"], dtype=float),
        "raft_mu": np.asarray(cols["raft_mu"], dtype=float),
    }
    members = (
        np.vstack(members_rows) if members_rows else np.empty((0, N_MEMBERS))
    )
    return CaseTable(columns, members)


def _case_scores(table: CaseTable, metric: str, source: str) -> np.ndarray:
    y = table.column("obs")
    if source == "raw":
        mean = table.members.mean(axis=1)
    elif source == "emos":
        mean = table.column("emos_mu")
    elif source == "raft":
        mean = table.column("raft_mu")
    else:
        raise ValueError(f"unknown source {source!r}")
    if metric == "rmse":
        return (mean - y) ** 2
    if metric == "mae":
        return np.abs(mean - y)
    if metric == "crps":
        if source == "raw":
            return crps_ensemble(table.members, y)
        # The adjusted mean is combined with the post-processed variance.
        return crps_gaussian(mean, np.sqrt(table.column("sigma2")), y)
    raise ValueError(f"unknown metric {metric!r}")


def aggregate(
    table: CaseTable,
    spec: ScoreSlice,
    metric: str = "rmse",
    source: str = "raft",
    ci: bool = False,
    n_resamples: int = 1000,
    level: float = 0.90,
    rng: Optional[np.random.Generator] = None,
) -> VerificationReport:
    """Aggregate one metric over exactly the cases matching the slice."""
    sub = table.filter(spec)
    if sub.n == 0:
        raise MissingDataError(f"empty slice: {spec.label()}")
    scores = _case_scores(sub, metric, source)
    if metric == "rmse":
        stat = lambda v, axis=None: np.sqrt(np.mean(v, axis=axis))
    else:
        stat = np.mean
    value = float(stat(scores, axis=None))
    low = high = None
    if ci and sub.n >= 2:
        low, value, high = bootstrap_ci(
            scores, n_resamples=n_resamples, level=level, rng=rng, statistic=stat
        )
    return VerificationReport(
        metric=metric, source=source, slice_label=spec.label(),
        n=sub.n, value=value, ci_low=low, ci_high=high,
    )


def station_scatter(table: CaseTable, metric: str = "rmse"):
    """Per-station adjusted-vs-issued scores, tagged by site type."""
    rows = []
    for station in sorted(set(table.column("station"))):
        spec = ScoreSlice(stations=(station,))
        sub = table.filter(spec)
        rows.append(
            {
                "station": station,
                "site_type": str(sub.column("site_type")[0]),
                "n": sub.n,
                f"emos_{metric}": aggregate(table, spec, metric, "emos").value,
                f"raft_{metric}": aggregate(table, spec, metric, "raft").value,
            }
        )
    return rows


def write_reports(reports: Sequence[VerificationReport], json_path: str, csv_path: str):
    """Emit report.json and report.csv for a batch of aggregates."""
    import csv as _csv

    payload = [r.to_dict() for r in reports]
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    fields = ["metric", "source", "slice_label", "n", "value", "ci_low", "ci_high"]
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in payload:
            row = {k: rec[k] for k in fields}
            for key in ("value", "ci_low", "ci_high"):
                if row[key] is not None:
                    row[key] = repr(float(row[key]))
                else:
                    row[key] = ""
            writer.writerow(row)
