"""Local post-processing of the raw ensemble into a Gaussian forecast.

The predictive distribution is N(mu, sigma2) with

    mu     = a + b^2 * ensemble_mean
    sigma2 = c^2 + d^2 * ensemble_variance

fitted by minimizing the mean Gaussian CRPS over a rolling 40-day
training window, separately per (station, init hour, lead time) cell.
The optimizer works in the unconstrained (a, b, c, d) space; squaring
inside the objective keeps the predictive variance non-negative and
makes the objective invariant under sign flips of b, c and d.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .core import (
    Dataset,
    CycleTime,
    EnsembleStats,
    InsufficientDataError,
    N_LEADS,
    ensemble_stats,
    valid_time,
)

logger = logging.getLogger(__name__)

TRAINING_WINDOW_DAYS = 40
MIN_TRAINING_PAIRS = 30
DEFAULT_INIT = (0.0, 1.0, 0.5, 1.0)
_FALLBACK_SIGMA = 1.5
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_NORM_CONST = 1.0 / math.sqrt(2.0 * math.pi)


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of a Gaussian forecast N(mu, sigma^2) against y.

    Parameters
    ----------
    mu, sigma, y : float or array_like
        Predictive mean, predictive standard deviation (> 0) and the
        verifying observation. Inputs broadcast.

    Returns
    -------
    float or ndarray
        crps = sigma * ( z*(2*Phi(z) - 1) + 2*phi(z) - 1/sqrt(pi) )
        with z = (y - mu)/sigma. Always >= 0.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be > 0")
    z = (y - mu) / sigma
    phi = _NORM_CONST * np.exp(-0.5 * z * z)
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi - _INV_SQRT_PI)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class EmosParams:
    """Fitted coefficients for one (station, init hour, lead) cell.

    a, b, c, d are stored unsquared; b^2, c^2, d^2 are the applied
    coefficients. After fitting, b, c, d are canonicalized to their
    absolute values (only the squares enter the model).
    """

    a: float
    b: float
    c: float
    d: float
    station: Optional[str] = None
    init_hour: Optional[int] = None
    lead: Optional[int] = None
    n_train: int = 0
    window: Optional[tuple[dt.date, dt.date]] = None
    source: str = "fit"

    @property
    def b2(self) -> float:
        return self.b * self.b

    @property
    def c2(self) -> float:
        return self.c * self.c

    @property
    def d2(self) -> float:
        return self.d * self.d

    def __post_init__(self):
        if self.c == 0.0 and self.d == 0.0:
            raise ValueError("c and d cannot both be zero (variance collapses)")


@dataclass(frozen=True)
class GaussianForecast:
    """Predictive N(mu, sigma2) for one cell."""

    mu: float
    sigma2: float
    station: Optional[str] = None
    init_hour: Optional[int] = None
    lead: Optional[int] = None

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def predict_emos(params: EmosParams, stats: EnsembleStats) -> GaussianForecast:
    """Plug ensemble statistics into the fitted coefficients."""
    mu = params.a + params.b2 * stats.mean
    sigma2 = params.c2 + params.d2 * stats.variance
    return GaussianForecast(
        mu=mu,
        sigma2=sigma2,
        station=params.station,
        init_hour=params.init_hour,
        lead=params.lead,
    )


def _mean_crps_objective(xbar, s2, y, mask, counts):
    """Build the batched objective: params (R, K, 4) -> mean CRPS (R, K).

    `rows` selects which batch rows the parameter sets belong to, so the
    optimizer can evaluate only its still-active problems.
    """
    xbar = xbar[:, None, :]
    s2 = s2[:, None, :]
    y = y[:, None, :]
    mask = mask[:, None, :]
    counts = counts[:, None]

    cache = {"key": None, "data": None}

    def objective(params, rows=None):
        if rows is None:
            xb, sv, yv, mk, ct = xbar, s2, y, mask, counts
        elif cache["key"] is rows:
            xb, sv, yv, mk, ct = cache["data"]
        else:
            xb, sv, yv, mk, ct = (
                xbar[rows], s2[rows], y[rows], mask[rows], counts[rows]
            )
            cache["key"] = rows
            cache["data"] = (xb, sv, yv, mk, ct)
        a = params[..., 0:1]
        b = params[..., 1:2]
        c = params[..., 2:3]
        d = params[..., 3:4]
        mu = a + b * b * xb
        sig2 = c * c + d * d * sv
        sigma = np.sqrt(np.maximum(sig2, 1e-12))
        z = (yv - mu) / sigma
        phi = _NORM_CONST * np.exp(-0.5 * z * z)
        crps = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi - _INV_SQRT_PI)
        return np.sum(crps * mk, axis=-1) / ct

    return objective


def nelder_mead_batch(
    objective,
    x0: np.ndarray,
    f_tol: float = 1e-8,
    max_iter: int = 500,
    initial_step: float = 0.25,
):
    """Minimize a batch of small unconstrained problems simultaneously.

    One synchronized Nelder-Mead sweep over B problems of dimension n.
    The per-problem update rules are the standard ones (reflection,
    expansion, outside/inside contraction, shrink); a problem freezes
    once its simplex function spread drops below ``f_tol``.

    Parameters
    ----------
    objective : callable
        objective(points, rows) maps points of shape (R, K, n) to values
        of shape (R, K), where `rows` are the batch indices the R point
        sets belong to (None means all B rows in order).
    x0 : ndarray, shape (B, n)
        Starting points; each is included in its initial simplex, so the
        achieved objective never exceeds the objective at the start.

    Returns
    -------
    x_best : ndarray, shape (B, n)
    f_best : ndarray, shape (B,)
    n_iter : ndarray, shape (B,) iterations used per problem
    """
    x0 = np.asarray(x0, dtype=float)
    B, n = x0.shape
    steps = initial_step * np.maximum(np.abs(x0), 1.0)
    simplex = np.repeat(x0[:, None, :], n + 1, axis=1)
    for i in range(n):
        simplex[:, i + 1, i] += steps[:, i]
    values = objective(simplex, None)

    n_iter = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    idx = np.flatnonzero(active)

    for _ in range(max_iter):
        # Re-sort only rows that were updated; frozen rows stay sorted.
        sub_vals = values[idx]
        order = np.argsort(sub_vals, axis=1)
        values[idx] = np.take_along_axis(sub_vals, order, axis=1)
        simplex[idx] = np.take_along_axis(simplex[idx], order[:, :, None], axis=1)

        spread = values[idx, -1] - values[idx, 0]
        active[idx] = spread > f_tol
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        n_iter[idx] += 1

        f_sub = values[idx]
        centroid = simplex[idx, :n].mean(axis=1)
        worst = simplex[idx, n]
        direction = centroid - worst

        x_r = centroid + direction
        f_r = objective(x_r[:, None, :], idx)[:, 0]

        f_best = f_sub[:, 0]
        f_second = f_sub[:, n - 1]
        f_worst = f_sub[:, n]

        expand = f_r < f_best
        reflect = (~expand) & (f_r < f_second)
        contract_out = (~expand) & (~reflect) & (f_r < f_worst)
        contract_in = (~expand) & (~reflect) & (~contract_out)

        # Each problem needs at most one more candidate evaluation.
        cand = np.where(
            expand[:, None],
            centroid + 2.0 * direction,
            np.where(
                contract_out[:, None],
                centroid + 0.5 * direction,
                centroid - 0.5 * direction,
            ),
        )
        f_cand = objective(cand[:, None, :], idx)[:, 0]

        new_point = x_r.copy()
        new_value = f_r.copy()
        better_exp = expand & (f_cand < f_r)
        new_point[better_exp] = cand[better_exp]
        new_value[better_exp] = f_cand[better_exp]
        take_oc = contract_out & (f_cand <= f_r)
        new_point[take_oc] = cand[take_oc]
        new_value[take_oc] = f_cand[take_oc]
        take_ic = contract_in & (f_cand < f_worst)
        new_point[take_ic] = cand[take_ic]
        new_value[take_ic] = f_cand[take_ic]

        accepted = expand | reflect | take_oc | take_ic
        acc_idx = idx[accepted]
        simplex[acc_idx, n] = new_point[accepted]
        values[acc_idx, n] = new_value[accepted]

        shrink = ~accepted
        if shrink.any():
            shr_idx = idx[shrink]
            best = simplex[shr_idx, 0:1]
            shrunk = best + 0.5 * (simplex[shr_idx, 1:] - best)
            simplex[shr_idx, 1:] = shrunk
            values[shr_idx, 1:] = objective(shrunk, shr_idx)

    order = np.argsort(values, axis=1)
    values = np.take_along_axis(values, order, axis=1)
    simplex = np.take_along_axis(simplex, order[:, :, None], axis=1)
    return simplex[:, 0], values[:, 0], n_iter


def _pairs_to_arrays(pairs):
    xbar = np.array([p[0].mean for p in pairs], dtype=float)
    s2 = np.array([p[0].variance for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    return xbar, s2, y


def fit_emos(
    training_pairs: Sequence[tuple[EnsembleStats, float]],
    init: Optional[tuple[float, float, float, float]] = None,
    min_pairs: int = MIN_TRAINING_PAIRS,
) -> EmosParams:
    """Minimum-CRPS estimate of (a, b, c, d) on forecast/observation pairs.

    Parameters
    ----------
    training_pairs : sequence of (EnsembleStats, y)
        Pairs with non-missing observations.
    init : optional (a, b, c, d) starting point.

    Raises
    ------
    InsufficientDataError
        Fewer than ``min_pairs`` pairs; the caller is expected to fall
        back (see rolling trainer).
    """
    if len(training_pairs) < min_pairs:
        raise InsufficientDataError(
            f"need at least {min_pairs} training pairs, got {len(training_pairs)}"
        )
    xbar, s2, y = _pairs_to_arrays(training_pairs)
    a, b, c, d = fit_emos_arrays(
        xbar[None, :], s2[None, :], y[None, :], np.isfinite(y)[None, :],
        x0=np.array([init if init is not None else DEFAULT_INIT], dtype=float),
    )[0]
    return EmosParams(a=a, b=b, c=c, d=d, n_train=len(training_pairs))


def fit_emos_arrays(xbar, s2, y, mask, x0, initial_step: float = 0.25):
    """Batched fit on pre-assembled arrays of shape (B, W).

    Masked-out entries must be finite dummies (they are ignored through
    the mask). Returns canonicalized parameters of shape (B, 4).
    """
    xbar = np.where(mask, xbar, 0.0)
    s2 = np.where(mask, s2, 0.0)
    y = np.where(mask, y, 0.0)
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise InsufficientDataError("every batch row needs at least one pair")
    objective = _mean_crps_objective(xbar, s2, y, mask.astype(float), counts)
    best, f_best, n_iter = nelder_mead_batch(objective, x0, initial_step=initial_step)
    if np.any(n_iter >= 500):
        stuck = int(np.sum(n_iter >= 500))
        logger.warning("EMOS fit hit the iteration cap for %d cell(s)", stuck)
    # Only the squares of b, c, d enter the model; canonicalize their sign.
    best[:, 1:] = np.abs(best[:, 1:])
    return best


def collect_training_pairs(
    dataset: Dataset,
    station: str,
    init_hour: int,
    lead: int,
    window: tuple[dt.date, dt.date],
):
    """Forecast/observation pairs for one cell over a date window.

    Pairs with a missing observation are skipped, never imputed.
    """
    pairs = []
    lo, hi = window
    date = lo
    one = dt.timedelta(days=1)
    while date <= hi:
        cycle = CycleTime(date, init_hour)
        if dataset.has_forecast(station, cycle):
            y = dataset.observation(station, valid_time(cycle, lead))
            if y is not None:
                pairs.append((ensemble_stats(dataset.forecast(station, cycle), lead), y))
        date += one
    return pairs


def rolling_window(as_of_date: dt.date) -> tuple[dt.date, dt.date]:
    """The 40 calendar days strictly before the forecast's init date."""
    return (
        as_of_date - dt.timedelta(days=TRAINING_WINDOW_DAYS),
        as_of_date - dt.timedelta(days=1),
    )


def rolling_fit(
    dataset: Dataset,
    cell: tuple[str, int, int],
    as_of_date: dt.date,
    init: Optional[tuple[float, float, float, float]] = None,
) -> EmosParams:
    """Fit one cell on its rolling window ending the day before as_of_date.

    Only the cell's own station data is used (local approach); fits for
    distinct cells are independent.
    """
    station, init_hour, lead = cell
    window = rolling_window(as_of_date)
    pairs = collect_training_pairs(dataset, station, init_hour, lead, window)
    params = fit_emos(pairs, init=init)
    return replace(
        params,
        station=station,
        init_hour=init_hour,
        lead=lead,
        window=window,
        n_train=len(pairs),
    )


class EmosParamStore:
    """Rolling parameters keyed by (station, init_hour, lead, as_of_date)."""

    def __init__(self):
        self._params: dict[tuple[str, int, int, dt.date], EmosParams] = {}

    def put(self, date: dt.date, params: EmosParams):
        key = (params.station, params.init_hour, params.lead, date)
        self._params[key] = params

    def get(
        self, station: str, init_hour: int, lead: int, date: dt.date
    ) -> Optional[EmosParams]:
        return self._params.get((station, init_hour, lead, date))

    def __len__(self):
        return len(self._params)

    def records(self):
        for key in sorted(self._params, key=lambda k: (k[0], k[1], k[2], k[3])):
            yield key, self._params[key]

    def to_json(self, path: str):
        payload = []
        for (station, init_hour, lead, date), p in self.records():
            payload.append(
                {
                    "station": station,
                    "init_hour": init_hour,
                    "lead": lead,
                    "date": date.isoformat(),
                    "a": p.a,
                    "b": p.b,
                    "c": p.c,
                    "d": p.d,
                    "n_train": p.n_train,
                    "window": [d.isoformat() for d in p.window] if p.window else None,
                    "source": p.source,
                }
            )
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "EmosParamStore":
        store = cls()
        with open(path) as fh:
            payload = json.load(fh)
        for rec in payload:
            params = EmosParams(
                a=rec["a"],
                b=rec["b"],
                c=rec["c"],
                d=rec["d"],
                station=rec["station"],
                init_hour=rec["init_hour"],
                lead=rec["lead"],
                n_train=rec["n_train"],
                window=tuple(dt.date.fromisoformat(d) for d in rec["window"])
                if rec.get("window")
                else None,
                source=rec.get("source", "fit"),
            )
            store.put(dt.date.fromisoformat(rec["date"]), params)
        return store


class CellPanel:
    """Per-(station, init_hour) daily arrays of ensemble stats and obs.

    Rows are consecutive dates, columns lead times; missing entries are
    NaN. This is the workhorse layout for rolling training and for the
    error panels consumed by the trajectory-adjustment trainer.
    """

    def __init__(self, dataset: Dataset, station: str, init_hour: int,
                 dates: Sequence[dt.date]):
        n = len(dates)
        self.station = station
        self.init_hour = init_hour
        self.dates = list(dates)
        self.index = {d: i for i, d in enumerate(self.dates)}
        self.xbar = np.full((n, N_LEADS), np.nan)
        self.s2 = np.full((n, N_LEADS), np.nan)
        self.y = np.full((n, N_LEADS), np.nan)
        obs = dataset.observations.get(station)
        for i, date in enumerate(self.dates):
            cycle = CycleTime(date, init_hour)
            fc = dataset.forecasts.get((station, cycle))
            if fc is not None:
                self.xbar[i] = fc.members.mean(axis=0)
                self.s2[i] = fc.members.var(axis=0)
            if obs is not None:
                t0 = cycle.init_instant
                for l in range(1, N_LEADS + 1):
                    value = obs.get(t0 + l)
                    if value is not None:
                        self.y[i, l - 1] = value


def train_rolling_emos(
    dataset: Dataset,
    dates: Sequence[dt.date],
    stations: Optional[Sequence[str]] = None,
    init_hours: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> EmosParamStore:
    """Rolling minimum-CRPS fits for every cell and every date in `dates`.

    Each day's fit is warm-started from the previous day's solution for
    the same cell. Cells with fewer than 30 window pairs reuse their most
    recent successful fit, and fall back to (a=0, b=1, c=sigma_clim, d=0)
    when none exists, sigma_clim being the window error standard
    deviation of the raw ensemble mean.

    ``workers`` > 1 splits the station list across processes; results do
    not depend on the worker count.
    """
    stations = sorted(stations if stations is not None else dataset.station_ids())
    manifest = dataset.manifest
    if init_hours is None:
        init_hours = manifest.init_hours if manifest is not None else (3, 9, 15, 21)
    init_hours = sorted(init_hours)
    dates = sorted(dates)

    if workers > 1 and len(stations) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [stations[i::workers] for i in range(workers)]
        chunks = [c for c in chunks if c]
        store = EmosParamStore()
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(train_rolling_emos, dataset, dates, chunk, init_hours, 1)
                for chunk in chunks
            ]
            # Merge deterministically in chunk order, not completion order.
            for future in futures:
                sub = future.result()
                for (st, ih, lead, date), params in sub.records():
                    store.put(date, params)
        return store

    store = EmosParamStore()
    first_date = dates[0] - dt.timedelta(days=TRAINING_WINDOW_DAYS)
    all_dates = []
    d = first_date
    while d <= dates[-1]:
        all_dates.append(d)
        d += dt.timedelta(days=1)
    date_index = {d: i for i, d in enumerate(all_dates)}

    # One cell per (init_hour, station, lead); all cells of a date fit in
    # a single batched sweep, warm-started from the previous date.
    panels = {
        (ih, st): CellPanel(dataset, st, ih, all_dates)
        for ih in init_hours
        for st in stations
    }
    cells = [
        (ih, st, lead)
        for ih in init_hours
        for st in stations
        for lead in range(1, N_LEADS + 1)
    ]
    n_cells = len(cells)
    warm = np.tile(np.array(DEFAULT_INIT), (n_cells, 1))
    last_good: list[Optional[EmosParams]] = [None] * n_cells

    for day_no, date in enumerate(dates):
        hi = date_index[date]  # window rows [hi-40, hi)
        lo = max(0, hi - TRAINING_WINDOW_DAYS)
        xb_list, s2_list, y_list = [], [], []
        for ih in init_hours:
            for st in stations:
                panel = panels[(ih, st)]
                xb_list.append(panel.xbar[lo:hi].T)
                s2_list.append(panel.s2[lo:hi].T)
                y_list.append(panel.y[lo:hi].T)
        xbar = np.vstack(xb_list)
        s2 = np.vstack(s2_list)
        yv = np.vstack(y_list)
        mask = np.isfinite(yv) & np.isfinite(xbar)
        counts = mask.sum(axis=1)
        fit_rows = np.flatnonzero(counts >= MIN_TRAINING_PAIRS)
        window = rolling_window(date)

        if fit_rows.size:
            fitted = fit_emos_arrays(
                xbar[fit_rows], s2[fit_rows], yv[fit_rows], mask[fit_rows],
                x0=warm[fit_rows],
                initial_step=0.25 if day_no == 0 else 0.05,
            )
            warm[fit_rows] = fitted

        fit_pos = {row: k for k, row in enumerate(fit_rows)}
        for row in range(n_cells):
            init_hour, station, lead = cells[row]
            if row in fit_pos:
                a, b, c, d_ = fitted[fit_pos[row]]
                params = EmosParams(
                    a=float(a), b=float(b), c=float(c), d=float(d_),
                    station=station, init_hour=init_hour, lead=lead,
                    n_train=int(counts[row]), window=window, source="fit",
                )
                last_good[row] = params
            elif last_good[row] is not None:
                params = replace(last_good[row], window=window, source="carry")
            else:
                err = yv[row][mask[row]] - xbar[row][mask[row]]
                sigma_clim = float(np.std(err)) if err.size >= 2 else _FALLBACK_SIGMA
                params = EmosParams(
                    a=0.0, b=1.0, c=max(sigma_clim, 0.1), d=0.0,
                    station=station, init_hour=init_hour, lead=lead,
                    n_train=int(counts[row]), window=window, source="fallback",
                )
            store.put(date, params)
    return store
