"""Rapid adjustment of already-issued forecast trajectories.

Once a post-processed trajectory has been issued, its future lead times
are corrected every hour from the errors the same trajectory has already
realized. The machinery has three stages:

1. Error regression: for a target lead l and an earlier predictor lead
   l*, ordinary least squares of e_l on e_l* over the training range,
   where e = observation - post-processed mean. Predictor leads <= 0
   wrap to the run initialized 24 hours earlier at lead l* + 24, trained
   as their own regression cells.
2. Adjustment period selection: a backward scan over candidate
   predictors in three significance tiers picks how far back errors
   still carry signal for lead l.
3. Online stepping: at wall-clock hour h after init the newest usable
   observation is the one at h-1 (one hour of processing delay); every
   lead whose period covers h-1 is re-adjusted. Each adjustment maps the
   raw post-processed error to a predicted error, so a new adjustment
   replaces the previous one rather than compounding it.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import stdtr

from .core import (
    CycleTime,
    Dataset,
    InsufficientDataError,
    N_LEADS,
)
from .emos import CellPanel, EmosParamStore

logger = logging.getLogger(__name__)

MAX_PERIOD = 22
PREDICTOR_SPAN = (-23, -2)  # candidate predictor offsets relative to the target
# Backward scan tiers: (confidence level, nearest offset, farthest offset).
SELECTION_TIERS = ((0.90, -2, -11), (0.95, -12, -19), (0.99, -20, -23))


@dataclass(frozen=True)
class ForecastError:
    """Realized error of a post-processed mean at one (cycle, lead)."""

    station: str
    cycle: CycleTime
    lead: int
    value: float


@dataclass(frozen=True)
class RaftLink:
    """One fitted error-on-error regression.

    predictor_lead is signed: values <= 0 denote the previous day's run
    at lead predictor_lead + 24. p_value is the two-sided t-test of the
    slope being zero.
    """

    alpha: float
    beta: float
    target_lead: int
    predictor_lead: int
    p_value: float
    residual_sd: float
    n_train: int
    usable: bool = True

    @property
    def uses_previous_run(self) -> bool:
        return self.predictor_lead <= 0

    @property
    def predictor_source_lead(self) -> int:
        """Lead time in the run that actually supplies the error."""
        return self.predictor_lead + 24 if self.predictor_lead <= 0 else self.predictor_lead

    def significant(self, level: float) -> bool:
        """Slope significantly different from zero at the given level."""
        return self.usable and self.p_value < (1.0 - level)


@dataclass(frozen=True)
class AdjustmentPlan:
    """Resolved adjustment schedule for one target lead.

    Observations used span predictor leads [l - p, l - 2]; the first
    adjustment executes at hour l - p + 1 and the final one at l - 1.
    """

    station: str
    init_hour: int
    target_lead: int
    period: int
    provenance: str
    links: dict[int, RaftLink] = field(default_factory=dict)

    def __post_init__(self):
        if not 2 <= self.period <= MAX_PERIOD:
            raise ValueError(f"period must be in [2, {MAX_PERIOD}], got {self.period}")
        # The backward scan guarantees fitted links everywhere except
        # possibly the period's earliest lead, where the scan may have
        # stopped on an unfittable pair; the adjuster skips that hour.
        missing = [
            l for l in self.predictor_leads()
            if l not in self.links and l != self.target_lead - self.period
        ]
        if missing:
            raise ValueError(f"plan lacks links for predictors {missing}")

    def predictor_leads(self) -> range:
        return range(self.target_lead - self.period, self.target_lead - 1)

    @property
    def first_execution(self) -> int:
        return self.target_lead - self.period + 1

    @property
    def final_execution(self) -> int:
        return self.target_lead - 1

    def covers(self, predictor_lead: int) -> bool:
        return (
            self.target_lead - self.period
            <= predictor_lead
            <= self.target_lead - 2
        )


class ErrorPanel:
    """Training errors for one (station, init_hour): rows are consecutive
    dates, columns lead times, NaN where forecast or observation is
    missing. Errors are always measured against the post-processed mean,
    never against an adjusted one."""

    def __init__(self, station: str, init_hour: int, dates: Sequence[dt.date],
                 errors: np.ndarray):
        errors = np.asarray(errors, dtype=float)
        if errors.shape != (len(dates), N_LEADS):
            raise ValueError("errors must have shape (n_dates, 36)")
        for a, b in zip(dates, dates[1:]):
            if (b - a).days != 1:
                raise ValueError("panel dates must be consecutive")
        self.station = station
        self.init_hour = init_hour
        self.dates = list(dates)
        self.errors = errors

    def series(self, target: int, predictor: int):
        """Aligned (predictor, target) error pairs; predictor <= 0 pulls
        the previous day's run at lead predictor + 24."""
        ty = self.errors[:, target - 1]
        if predictor >= 1:
            tx = self.errors[:, predictor - 1]
        else:
            source = predictor + 24
            tx = np.full_like(ty, np.nan)
            tx[1:] = self.errors[:-1, source - 1]
        return tx, ty

    def iter_errors(self) -> Iterable[ForecastError]:
        """All realized errors as records, skipping missing entries."""
        for i, date in enumerate(self.dates):
            cycle = CycleTime(date, self.init_hour)
            for lead in range(1, N_LEADS + 1):
                value = self.errors[i, lead - 1]
                if np.isfinite(value):
                    yield ForecastError(self.station, cycle, lead, float(value))


def compute_errors(
    dataset: Dataset,
    store: EmosParamStore,
    station: str,
    init_hour: int,
    dates: Sequence[dt.date],
) -> ErrorPanel:
    """Error panel e = y - mu over `dates` using the rolling parameters."""
    dates = sorted(dates)
    panel = CellPanel(dataset, station, init_hour, dates)
    a = np.full((len(dates), N_LEADS), np.nan)
    b2 = np.full((len(dates), N_LEADS), np.nan)
    for i, date in enumerate(dates):
        for lead in range(1, N_LEADS + 1):
            params = store.get(station, init_hour, lead, date)
            if params is not None:
                a[i, lead - 1] = params.a
                b2[i, lead - 1] = params.b2
    mu = a + b2 * panel.xbar
    return ErrorPanel(station, init_hour, dates, panel.y - mu)


def fit_link(panel: ErrorPanel, target: int, predictor: int) -> RaftLink:
    """OLS of the target-lead error on the predictor-lead error.

    Returns an unusable link when the predictor series has (numerically)
    zero variance. Raises InsufficientDataError below 3 complete pairs.
    """
    tx, ty = panel.series(target, predictor)
    mask = np.isfinite(tx) & np.isfinite(ty)
    n = int(mask.sum())
    if n < 3:
        raise InsufficientDataError(
            f"lead pair ({target}, {predictor}): {n} complete pairs"
        )
    x = tx[mask]
    y = ty[mask]
    xm = x.mean()
    ym = y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 1e-12 * n:
        return RaftLink(
            alpha=float(ym), beta=0.0, target_lead=target, predictor_lead=predictor,
            p_value=1.0, residual_sd=float(np.std(y, ddof=1)), n_train=n,
            usable=False,
        )
    sxy = float(np.sum((x - xm) * (y - ym)))
    beta = sxy / sxx
    alpha = ym - beta * xm
    resid = y - (alpha + beta * x)
    dof = n - 2
    s2 = float(np.sum(resid**2)) / dof
    se_beta = math.sqrt(s2 / sxx)
    if se_beta == 0.0:
        p_value = 0.0
    else:
        t_stat = beta / se_beta
        p_value = 2.0 * (1.0 - stdtr(dof, abs(t_stat)))
    return RaftLink(
        alpha=alpha, beta=beta, target_lead=target, predictor_lead=predictor,
        p_value=min(max(p_value, 0.0), 1.0), residual_sd=math.sqrt(s2),
        n_train=n,
    )


@dataclass
class CorrelationMatrix:
    """Pairwise lead-time error correlations with test p-values.

    Entries with fewer than 3 complete pairs are NaN (unavailable).
    """

    corr: np.ndarray
    p_value: np.ndarray
    n: np.ndarray

    def masked(self, level: float = 0.90) -> np.ndarray:
        """Correlations shown only where significant at `level`."""
        out = self.corr.copy()
        out[self.p_value >= (1.0 - level)] = np.nan
        return out


def error_correlation_matrix(panel: ErrorPanel) -> CorrelationMatrix:
    """Pearson correlations of the forecast error between all lead pairs."""
    corr = np.full((N_LEADS, N_LEADS), np.nan)
    pval = np.full((N_LEADS, N_LEADS), np.nan)
    counts = np.zeros((N_LEADS, N_LEADS), dtype=int)
    e = panel.errors
    finite = np.isfinite(e)
    for i in range(N_LEADS):
        for j in range(i, N_LEADS):
            mask = finite[:, i] & finite[:, j]
            n = int(mask.sum())
            counts[i, j] = counts[j, i] = n
            if i == j:
                if n >= 1:
                    corr[i, j] = 1.0
                    pval[i, j] = 0.0
                continue
            if n < 3:
                continue
            xi = e[mask, i]
            xj = e[mask, j]
            xi = xi - xi.mean()
            xj = xj - xj.mean()
            denom = math.sqrt(float(np.sum(xi**2)) * float(np.sum(xj**2)))
            if denom == 0.0:
                continue
            r = float(np.sum(xi * xj)) / denom
            r = min(max(r, -1.0), 1.0)
            if abs(r) == 1.0:
                p = 0.0
            else:
                t_stat = r * math.sqrt((n - 2) / (1.0 - r * r))
                p = 2.0 * (1.0 - stdtr(n - 2, abs(t_stat)))
            corr[i, j] = corr[j, i] = r
            pval[i, j] = pval[j, i] = p
    return CorrelationMatrix(corr=corr, p_value=pval, n=counts)


def _tiered_stop(links: Mapping[int, RaftLink], target: int) -> Optional[int]:
    """Backward scan for the first predictor whose slope is not
    significantly different from zero, tightening the level per tier.
    Missing or unusable links cannot justify an adjustment and stop the
    scan the same way a non-significant slope does."""
    for level, near, far in SELECTION_TIERS:
        for offset in range(near, far - 1, -1):
            lstar = target + offset
            link = links.get(lstar)
            if link is None or not link.significant(level):
                return lstar
    return None


def select_adjustment_period(
    links: Mapping[int, RaftLink],
    station: str,
    init_hour: int,
    target: int,
    neighbor_periods: tuple[Optional[int], Optional[int]] = (None, None),
) -> AdjustmentPlan:
    """Resolve the adjustment period for one target lead.

    The tier scan yields the first non-significant predictor l_p and
    p = target - l_p. If every scanned link is significant, p falls back
    to the average of the neighbouring leads' scan results (rounded half
    up) and finally to the maximum length 22. The result and its
    provenance do not depend on the order the links were fitted in.
    """
    stop = _tiered_stop(links, target)
    if stop is not None:
        period = target - stop
        provenance = "tier"
        for level, near, far in SELECTION_TIERS:
            if target + far <= stop <= target + near:
                provenance = f"tier{int(round(level * 100))}"
                break
    else:
        left, right = neighbor_periods
        if left is not None and right is not None:
            period = int(math.floor((left + right) / 2.0 + 0.5))
            provenance = "neighbor_mean"
        else:
            period = MAX_PERIOD
            provenance = "max_fallback"
    period = min(max(period, 2), MAX_PERIOD)
    plan_links = {
        l: links[l]
        for l in range(target - period, target - 1)
        if l in links
    }
    return AdjustmentPlan(
        station=station,
        init_hour=init_hour,
        target_lead=target,
        period=period,
        provenance=provenance,
        links=plan_links,
    )


class RaftModel:
    """Frozen adjustment plans per (station, init_hour, target_lead).

    Fitted once on the training range; the coefficients stay valid until
    the forecast system or the local error climate changes.
    """

    def __init__(self):
        self.plans: dict[tuple[str, int, int], AdjustmentPlan] = {}

    def put(self, plan: AdjustmentPlan):
        self.plans[(plan.station, plan.init_hour, plan.target_lead)] = plan

    def get(self, station: str, init_hour: int, target: int) -> Optional[AdjustmentPlan]:
        return self.plans.get((station, init_hour, target))

    def plans_for(self, station: str, init_hour: int) -> dict[int, AdjustmentPlan]:
        return {
            target: plan
            for (st, ih, target), plan in self.plans.items()
            if st == station and ih == init_hour
        }

    def __len__(self):
        return len(self.plans)

    def to_json(self, path: str):
        payload = []
        for key in sorted(self.plans):
            plan = self.plans[key]
            payload.append(
                {
                    "station": plan.station,
                    "init_hour": plan.init_hour,
                    "target_lead": plan.target_lead,
                    "period": plan.period,
                    "provenance": plan.provenance,
                    "links": [
                        {
                            "predictor_lead": link.predictor_lead,
                            "alpha": link.alpha,
                            "beta": link.beta,
                            "p_value": link.p_value,
                            "residual_sd": link.residual_sd,
                            "n_train": link.n_train,
                            "usable": link.usable,
                            "previous_run": link.uses_previous_run,
                        }
                        for _, link in sorted(plan.links.items())
                    ],
                }
            )
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "RaftModel":
        model = cls()
        with open(path) as fh:
            payload = json.load(fh)
        for rec in payload:
            links = {
                l["predictor_lead"]: RaftLink(
                    alpha=l["alpha"],
                    beta=l["beta"],
                    target_lead=rec["target_lead"],
                    predictor_lead=l["predictor_lead"],
                    p_value=l["p_value"],
                    residual_sd=l["residual_sd"],
                    n_train=l["n_train"],
                    usable=l["usable"],
                )
                for l in rec["links"]
            }
            model.put(
                AdjustmentPlan(
                    station=rec["station"],
                    init_hour=rec["init_hour"],
                    target_lead=rec["target_lead"],
                    period=rec["period"],
                    provenance=rec["provenance"],
                    links=links,
                )
            )
        return model


def train_raft(panels: Iterable[ErrorPanel]) -> RaftModel:
    """Fit all links and resolve all adjustment periods.

    Training is independent per (station, init_hour, target_lead); the
    period selection for a lead only consults its own links, plus its
    neighbours' tier-scan results when its own scan is exhausted.
    """
    model = RaftModel()
    for panel in panels:
        all_links: dict[int, dict[int, RaftLink]] = {}
        stops: dict[int, Optional[int]] = {}
        for target in range(1, N_LEADS + 1):
            links = {}
            for offset in range(PREDICTOR_SPAN[0], PREDICTOR_SPAN[1] + 1):
                lstar = target + offset
                try:
                    links[lstar] = fit_link(panel, target, lstar)
                except InsufficientDataError:
                    continue
            all_links[target] = links
            stops[target] = _tiered_stop(links, target)
        for target in range(1, N_LEADS + 1):
            # Neighbour period lengths from the tier scans alone.
            left = (target - 1) - stops[target - 1] if stops.get(target - 1) is not None else None
            right = (target + 1) - stops[target + 1] if stops.get(target + 1) is not None else None
            plan = select_adjustment_period(
                all_links[target],
                panel.station,
                panel.init_hour,
                target,
                neighbor_periods=(left, right),
            )
            model.put(plan)
    return model


@dataclass
class LiveTrajectory:
    """Online adjustment state for one issued trajectory.

    `adjusted` starts as a copy of the issued mean and is overwritten in
    place; every entry depends only on the issued mean and the single
    most recent applicable predictor error.
    """

    station: str
    cycle: CycleTime
    base_mu: np.ndarray
    base_sigma2: np.ndarray
    adjusted: np.ndarray = None
    adjustment_log: dict[int, int] = field(default_factory=dict)
    skips: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.base_mu = np.asarray(self.base_mu, dtype=float)
        self.base_sigma2 = np.asarray(self.base_sigma2, dtype=float)
        if self.base_mu.shape != (N_LEADS,) or self.base_sigma2.shape != (N_LEADS,):
            raise ValueError("base arrays must have shape (36,)")
        if self.adjusted is None:
            self.adjusted = self.base_mu.copy()

    def mu(self, lead: int) -> float:
        return float(self.adjusted[lead - 1])


def apply_adjustment(
    live: LiveTrajectory,
    plan: AdjustmentPlan,
    predictor_lead: int,
    error: float,
) -> bool:
    """Adjust one lead from an observed error at a predictor lead.

    The error must be measured against the issued (unadjusted) mean.
    Re-applying the same input is idempotent; a predictor outside the
    plan's period is a logged no-op. Returns True when applied.
    """
    target = plan.target_lead
    if not plan.covers(predictor_lead):
        live.skips.append((target, predictor_lead, "outside_period"))
        return False
    link = plan.links.get(predictor_lead)
    if link is None or not link.usable:
        live.skips.append((target, predictor_lead, "unusable_link"))
        return False
    predicted_error = link.alpha + link.beta * error
    live.adjusted[target - 1] = live.base_mu[target - 1] + predicted_error
    live.adjustment_log[target] = predictor_lead
    return True


def step_clock(
    live: LiveTrajectory,
    observations,
    hour: int,
    plans: Mapping[int, AdjustmentPlan],
    previous_base_mu: Optional[np.ndarray] = None,
    on_adjust=None,
):
    """Advance one trajectory to wall-clock hour `hour` after init.

    The newest usable observation is the one recorded at hour - 1.
    Every lead whose adjustment period covers predictor lead hour - 1 is
    re-adjusted. A predictor lead <= 0 resolves to the run initialized
    24 hours earlier (its lead + 24); without that run's issued means,
    the affected leads keep their previous adjustment.
    """
    predictor = hour - 1
    t0 = live.cycle.init_instant
    if predictor >= 1:
        base = float(live.base_mu[predictor - 1])
    else:
        if previous_base_mu is None:
            for target, plan in plans.items():
                if plan.covers(predictor):
                    live.skips.append((target, predictor, "no_previous_run"))
            return live
        base = float(previous_base_mu[predictor + 24 - 1])
    y = observations.get(t0 + predictor)
    if y is None:
        for target, plan in plans.items():
            if plan.covers(predictor):
                live.skips.append((target, predictor, "missing_observation"))
        return live
    error = y - base
    for target in range(max(predictor + 2, 1), N_LEADS + 1):
        plan = plans.get(target)
        if plan is None or not plan.covers(predictor):
            continue
        if apply_adjustment(live, plan, predictor, error) and on_adjust is not None:
            on_adjust(hour, target, predictor, float(live.adjusted[target - 1]))
    return live
