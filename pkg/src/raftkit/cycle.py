"""Replay of the operational forecast cycle.

Four runs per day are issued post-processed at init time, then stepped
hourly so every new observation re-adjusts the leads whose adjustment
period it falls into. The ledger records the issued trajectory plus
every adjustment event, which is enough to reconstruct the forecast in
force at any (lead, wall-clock hour) without re-running the adjuster.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigError,
    CycleTime,
    Dataset,
    MissingDataError,
    N_LEADS,
    previous_day_run,
)
from .emos import EmosParamStore
from .raft import LiveTrajectory, RaftModel, step_clock

logger = logging.getLogger(__name__)

_SOURCE_EMOS = "EMOS"
_SOURCE_RAFT = "RAFT"


@dataclass(frozen=True)
class CyclePolicy:
    """How far the hourly adjustment is allowed to run.

    mode 'emos_only' issues and never adjusts; 'raft_full' steps through
    hour 36; 'raft_until' stops issuing new adjustments after wall-clock
    hour `until_lead`, which reproduces mid-cycle snapshots.
    run_selection is carried for consumers assembling a "current best"
    series across runs.
    """

    mode: str = "raft_full"
    until_lead: Optional[int] = None
    run_selection: str = "newest_run"

    def __post_init__(self):
        if self.mode not in ("emos_only", "raft_full", "raft_until"):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if self.mode == "raft_until" and not self.until_lead:
            raise ConfigError("raft_until requires until_lead")
        if self.run_selection not in ("newest_run", "best_by_time_of_day"):
            raise ConfigError(f"unknown run_selection {self.run_selection!r}")

    @property
    def last_step_hour(self) -> int:
        if self.mode == "emos_only":
            return 0
        if self.mode == "raft_until":
            return min(self.until_lead, N_LEADS)
        return N_LEADS


@dataclass
class TrajectoryRecord:
    """Ledger entry for one (station, cycle): the issued trajectory and
    the full append-only adjustment event log."""

    station: str
    cycle: CycleTime
    base_mu: np.ndarray
    sigma2: np.ndarray
    final_mu: np.ndarray
    predictor_log: dict[int, int]
    events: list[tuple[int, int, int, float]]  # (hour, lead, predictor, value)
    skips: list[tuple[int, int, str]]

    def in_force(self, hour: int) -> np.ndarray:
        """Mean trajectory in force at a wall-clock hour after init."""
        mu = self.base_mu.copy()
        for h, lead, _, value in self.events:
            if h <= hour:
                mu[lead - 1] = value
        return mu

    def source_at(self, hour: int) -> np.ndarray:
        src = np.zeros(N_LEADS, dtype=bool)
        for h, lead, _, _ in self.events:
            if h <= hour:
                src[lead - 1] = True
        return src

    def snapshot(self, hour: int) -> dict:
        """Mid-cycle view: verified leads carry their final (most
        short-term) adjustment, future leads the value in force now."""
        current = self.in_force(hour)
        past = np.where(np.arange(1, N_LEADS + 1) <= hour, self.final_mu, np.nan)
        future = np.where(np.arange(1, N_LEADS + 1) > hour, current, np.nan)
        return {"hour": hour, "verified": past, "pending": future}


class CycleLedger:
    """All in-force forecasts from one replay, keyed by (station, cycle)."""

    def __init__(self, policy: CyclePolicy):
        self.policy = policy
        self.records: dict[tuple[str, CycleTime], TrajectoryRecord] = {}

    def put(self, record: TrajectoryRecord):
        self.records[(record.station, record.cycle)] = record

    def get(self, station: str, cycle: CycleTime) -> TrajectoryRecord:
        try:
            return self.records[(station, cycle)]
        except KeyError:
            raise MissingDataError(f"no ledger record for {station} {cycle}") from None

    def __len__(self):
        return len(self.records)

    def sorted_records(self):
        for key in sorted(self.records, key=lambda k: (k[0], k[1])):
            yield self.records[key]

    def write_csv(self, path: str, dataset: Optional[Dataset] = None):
        """Long-format export: one row per (lead, wall-clock hour) with
        the forecast in force at that hour, hours 0 through the lead."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "station", "cycle_date", "init_hour", "lead",
                    "wallclock_hour", "source", "predictor_lead",
                    "mu_hat", "sigma2", "obs",
                ]
            )
            for rec in self.sorted_records():
                t0 = rec.cycle.init_instant
                mu = rec.base_mu.copy()
                source = [""] * N_LEADS
                predictor = [""] * N_LEADS
                events_by_hour: dict[int, list] = {}
                for h, lead, pred, value in rec.events:
                    events_by_hour.setdefault(h, []).append((lead, pred, value))
                obs_cache = {}
                if dataset is not None:
                    for lead in range(1, N_LEADS + 1):
                        y = dataset.observation(rec.station, t0 + lead)
                        obs_cache[lead] = "" if y is None else repr(float(y))
                for hour in range(0, N_LEADS + 1):
                    for lead, pred, value in events_by_hour.get(hour, []):
                        mu[lead - 1] = value
                        source[lead - 1] = _SOURCE_RAFT
                        predictor[lead - 1] = str(pred)
                    # A lead stays in force through its valid hour h == lead.
                    for lead in range(max(hour, 1), N_LEADS + 1):
                        writer.writerow(
                            [
                                rec.station,
                                rec.cycle.date.isoformat(),
                                str(rec.cycle.init_hour),
                                str(lead),
                                str(hour),
                                source[lead - 1] or _SOURCE_EMOS,
                                predictor[lead - 1],
                                repr(float(mu[lead - 1])),
                                repr(float(rec.sigma2[lead - 1])),
                                obs_cache.get(lead, ""),
                            ]
                        )


def read_ledger_csv(path: str, policy: Optional[CyclePolicy] = None) -> CycleLedger:
    """Rebuild a ledger from its CSV export (finals and events included)."""
    ledger = CycleLedger(policy or CyclePolicy(mode="raft_full"))
    rows_by_traj: dict[tuple[str, CycleTime], list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            cycle = CycleTime(dt.date.fromisoformat(row["cycle_date"]), int(row["init_hour"]))
            rows_by_traj.setdefault((row["station"], cycle), []).append(row)
    for (station, cycle), rows in rows_by_traj.items():
        base_mu = np.full(N_LEADS, np.nan)
        sigma2 = np.full(N_LEADS, np.nan)
        final_mu = np.full(N_LEADS, np.nan)
        predictor_log: dict[int, int] = {}
        events: list[tuple[int, int, int, float]] = []
        last_state: dict[int, tuple] = {}
        for row in sorted(rows, key=lambda r: (int(r["lead"]), int(r["wallclock_hour"]))):
            lead = int(row["lead"])
            hour = int(row["wallclock_hour"])
            value = float(row["mu_hat"])
            sigma2[lead - 1] = float(row["sigma2"])
            if hour == 0:
                base_mu[lead - 1] = value
            state = (value, row["predictor_lead"])
            if row["source"] == _SOURCE_RAFT and last_state.get(lead) != state:
                pred = int(row["predictor_lead"])
                events.append((hour, lead, pred, value))
                predictor_log[lead] = pred
            last_state[lead] = state
            if hour == lead:
                final_mu[lead - 1] = value
        missing_base = ~np.isfinite(base_mu)
        if missing_base.any():
            raise MissingDataError(f"ledger csv lacks hour-0 rows for {station} {cycle}")
        final_mu = np.where(np.isfinite(final_mu), final_mu, base_mu)
        events.sort(key=lambda e: (e[0], e[1]))
        ledger.put(
            TrajectoryRecord(
                station=station, cycle=cycle, base_mu=base_mu, sigma2=sigma2,
                final_mu=final_mu, predictor_log=predictor_log, events=events,
                skips=[],
            )
        )
    return ledger


def _issue_base(dataset, store, station, cycle):
    """Post-processed trajectory at issue time, or None when parameters
    or the raw forecast are unavailable."""
    fc = dataset.forecasts.get((station, cycle))
    if fc is None:
        return None
    xbar = fc.members.mean(axis=0)
    s2 = fc.members.var(axis=0)
    mu = np.empty(N_LEADS)
    sigma2 = np.empty(N_LEADS)
    for lead in range(1, N_LEADS + 1):
        params = store.get(station, cycle.init_hour, lead, cycle.date)
        if params is None:
            return None
        mu[lead - 1] = params.a + params.b2 * xbar[lead - 1]
        sigma2[lead - 1] = params.c2 + params.d2 * s2[lead - 1]
    return mu, sigma2


def replay(
    dataset: Dataset,
    emos_store: EmosParamStore,
    raft_model: Optional[RaftModel],
    policy: CyclePolicy,
    stations: Optional[Sequence[str]] = None,
    date_range: Optional[tuple[dt.date, dt.date]] = None,
    init_hours: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> CycleLedger:
    """Replay every cycle: issue at init, then step once per hour.

    Stations replay independently; within a station, cycles run in time
    order so that hour-1 steps can reach the previous day's issued
    means. Cycles whose adjustment plans are missing are logged and kept
    as issued (post-processing only). Identical inputs produce an
    identical ledger.
    """
    stations = sorted(stations if stations is not None else dataset.station_ids())
    if workers > 1 and len(stations) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [stations[i::workers] for i in range(workers)]
        chunks = [c for c in chunks if c]
        ledger = CycleLedger(policy)
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    replay, dataset, emos_store, raft_model, policy,
                    chunk, date_range, init_hours, 1,
                )
                for chunk in chunks
            ]
            for future in futures:
                for rec in future.result().sorted_records():
                    ledger.put(rec)
        return ledger

    ledger = CycleLedger(policy)
    uncovered = set()
    for station in stations:
        cycles = dataset.cycles(station=station)
        if init_hours is not None:
            cycles = [c for c in cycles if c.init_hour in set(init_hours)]
        if date_range is not None:
            cycles = [c for c in cycles if date_range[0] <= c.date <= date_range[1]]
        obs = dataset.observations.get(station)
        base_cache: dict[CycleTime, np.ndarray] = {}
        for cycle in cycles:
            issued = _issue_base(dataset, emos_store, station, cycle)
            if issued is None:
                continue
            base_mu, sigma2 = issued
            base_cache[cycle] = base_mu
            live = LiveTrajectory(
                station=station, cycle=cycle, base_mu=base_mu, base_sigma2=sigma2
            )
            events: list[tuple[int, int, int, float]] = []
            if policy.mode != "emos_only" and raft_model is not None and obs is not None:
                plans = raft_model.plans_for(station, cycle.init_hour)
                if not plans:
                    if (station, cycle.init_hour) not in uncovered:
                        uncovered.add((station, cycle.init_hour))
                        logger.info(
                            "no adjustment plans for %s %02dZ, keeping issued means",
                            station, cycle.init_hour,
                        )
                else:
                    prev = base_cache.get(previous_day_run(cycle))
                    if prev is None:
                        prev_issued = _issue_base(
                            dataset, emos_store, station, previous_day_run(cycle)
                        )
                        prev = prev_issued[0] if prev_issued is not None else None
                    record_event = lambda h, lead, pred, value: events.append(
                        (h, lead, pred, value)
                    )
                    for hour in range(1, policy.last_step_hour + 1):
                        step_clock(
                            live, obs, hour, plans,
                            previous_base_mu=prev, on_adjust=record_event,
                        )
            ledger.put(
                TrajectoryRecord(
                    station=station,
                    cycle=cycle,
                    base_mu=base_mu,
                    sigma2=sigma2,
                    final_mu=live.adjusted.copy(),
                    predictor_log=dict(live.adjustment_log),
                    events=events,
                    skips=list(live.skips),
                )
            )
    return ledger


def run_comparison(
    ledger: CycleLedger,
    dataset: Dataset,
    n_resamples: int = 1000,
    level: float = 0.90,
    seed: int = 0,
):
    """Score the four daily runs against each other by time of day.

    For each (init hour, time of day) the most recent forecast instance
    is used: lead (tod - init) mod 24, mapping 0 to 24. Returns a list of
    dicts with RMSE and percentile-bootstrap confidence bounds; a ledger
    holding a single run degenerates to a single curve.
    """
    from .verify import bootstrap_ci

    cases: dict[tuple[int, int], list[float]] = {}
    for rec in ledger.sorted_records():
        t0 = rec.cycle.init_instant
        for lead in range(1, 25):
            y = dataset.observation(rec.station, t0 + lead)
            if y is None:
                continue
            tod = (rec.cycle.init_hour + lead) % 24
            cases.setdefault((rec.cycle.init_hour, tod), []).append(
                (rec.final_mu[lead - 1] - y) ** 2
            )
    rng = np.random.default_rng(seed)
    rows = []
    for (init_hour, tod) in sorted(cases):
        sq = np.asarray(cases[(init_hour, tod)])
        lead = (tod - init_hour) % 24 or 24
        if sq.size >= 2:
            lo, center, hi = bootstrap_ci(
                sq, n_resamples=n_resamples, level=level,
                rng=rng, statistic=lambda v, axis=None: np.sqrt(np.mean(v, axis=axis)),
            )
        else:
            lo = center = hi = float(np.sqrt(sq.mean()))
        rows.append(
            {
                "init_hour": init_hour,
                "time_of_day": tod,
                "lead": lead,
                "n": int(sq.size),
                "rmse": float(center),
                "ci_low": float(lo),
                "ci_high": float(hi),
            }
        )
    return rows
