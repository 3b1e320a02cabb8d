"""Dataset generation and CSV/JSON interchange.

The CSV schemas here are the interchange contract: any external forecast
archive converted to them can be fed through the library unchanged.

The synthetic generator plants every quantity the estimation procedures
are later asked to recover, so it doubles as the oracle for the test
suite. Construction, per station:

    truth(t)   = base + annual(t) + diurnal(t) + u(t)
    obs(t)     = truth(t) + delta(t)
    member im  = truth(t0+l) + bias + eps(l) + g_i(l)      (per cycle t0)

where u is an hourly AR(1) (coefficient ``truth_ar1_coeff``), delta is
iid N(0, obs_noise_sd^2), g_i is iid member jitter with standard
deviation ``spread_deflation * obs_noise_sd``, and eps is one error
trajectory shared by all 12 members:

    eps(l) = rho * base_amp * (1 + growth*(l-1)) * z(l)

with z a stationary unit-variance AR(1) in lead time with coefficient
rho = ``error_ar1_coeff``. Because correlations are invariant under the
per-lead rescaling, the shared-error correlation between leads l1 and l2
is exactly rho**|l1-l2|, while its amplitude grows with lead time (skill
deteriorates along the trajectory). Scaling the amplitude by rho makes
the rho -> 0 limit recover an exchangeable ensemble: members and the
observation then all scatter iid around truth with equal variance, which
is the calibrated configuration (flat rank histogram). spread_deflation
below 1 shrinks the member jitter relative to the observation scatter
and produces the familiar U-shaped rank histogram.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    ConfigError,
    CycleTime,
    DataError,
    Dataset,
    INIT_HOURS,
    N_LEADS,
    N_MEMBERS,
    ObservationSeries,
    SiteType,
    Station,
    TrajectoryForecast,
    format_instant,
    instant,
    parse_instant,
)

FORECAST_FILE = "forecasts.csv"
OBSERVATION_FILE = "observations.csv"
MANIFEST_FILE = "manifest.json"

_FORECAST_HEADER = ["station", "date", "init_hour", "lead"] + [
    f"m{i:02d}" for i in range(1, N_MEMBERS + 1)
]
_OBS_HEADER = ["station", "valid_time_iso8601", "temp_c"]

# Internal scales of the synthetic truth/forecast processes. These are
# constants of the generator, not knobs: the planted quantities exposed
# to tests are the SyntheticConfig fields.
_STATION_BASE_MEAN = 9.0
_STATION_BASE_SD = 3.0
_ANNUAL_AMPLITUDE = 4.0
_ANNUAL_PEAK_DOY = 200
_DIURNAL_PEAK_HOUR = 15
_WEATHER_SD = 4.5
_SHARED_ERROR_BASE = 1.0
_SHARED_ERROR_GROWTH = 0.03
_SPIN_UP_DAYS = 40
_START_DATE = dt.date(2014, 1, 1)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic dataset generator.

    Attributes:
        seed: RNG seed; the same seed yields a bit-identical dataset.
        n_stations: number of stations (site types cycle through
            coastal/inland/mountain).
        n_days: total days of forecasts; the first 40 are spin-up for
            rolling training windows.
        diurnal_amplitude: amplitude of the daily temperature cycle (C).
        truth_ar1_coeff: hourly AR(1) coefficient of the weather process.
        forecast_bias: additive bias planted in every member (C).
        spread_deflation: member jitter sd as a fraction of the
            observation scatter; 1 is calibrated, below 1 underdispersed.
        error_ar1_coeff: lead-to-lead AR(1) coefficient of the shared
            forecast error; also scales its amplitude.
        obs_noise_sd: scatter of observations around truth (C).
    """

    seed: int
    n_stations: int = 4
    n_days: int = 160
    diurnal_amplitude: float = 5.0
    truth_ar1_coeff: float = 0.97
    forecast_bias: float = 0.5
    spread_deflation: float = 0.7
    error_ar1_coeff: float = 0.6
    obs_noise_sd: float = 0.8

    def __post_init__(self):
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.n_days < _SPIN_UP_DAYS + 10:
            raise ConfigError(f"n_days must be >= {_SPIN_UP_DAYS + 10}")
        if not 0 < self.truth_ar1_coeff < 1:
            raise ConfigError("truth_ar1_coeff must be in (0, 1)")
        if not 0 < self.error_ar1_coeff < 1:
            raise ConfigError("error_ar1_coeff must be in (0, 1)")
        if not 0 < self.spread_deflation <= 1:
            raise ConfigError("spread_deflation must be in (0, 1]")
        if self.obs_noise_sd < 0:
            raise ConfigError("obs_noise_sd must be >= 0")
        if self.diurnal_amplitude < 0:
            raise ConfigError("diurnal_amplitude must be >= 0")


@dataclass
class DatasetManifest:
    """Provenance and split metadata for a dataset.

    training_range and test_range are inclusive date intervals and are
    disjoint by construction; dates before training_range are spin-up
    used only to fill early rolling windows.
    """

    stations: list[Station]
    init_hours: tuple[int, ...]
    start_date: dt.date
    end_date: dt.date
    training_range: tuple[dt.date, dt.date]
    test_range: tuple[dt.date, dt.date]
    provenance: str = "synthetic"
    planted_truth: Optional[dict] = None

    def __post_init__(self):
        if self.training_range[1] >= self.test_range[0]:
            raise ConfigError("training_range and test_range must be disjoint")

    def dates(self) -> list[dt.date]:
        n = (self.end_date - self.start_date).days + 1
        return [self.start_date + dt.timedelta(days=i) for i in range(n)]

    def cycles(self) -> list[CycleTime]:
        return [
            CycleTime(d, h) for d in self.dates() for h in self.init_hours
        ]

    def dates_in(self, date_range: tuple[dt.date, dt.date]) -> list[dt.date]:
        lo, hi = date_range
        return [d for d in self.dates() if lo <= d <= hi]


def _split_ranges(start: dt.date, n_days: int):
    """Spin-up, then up to a training year, then the test remainder."""
    train_start = start + dt.timedelta(days=_SPIN_UP_DAYS)
    usable = n_days - _SPIN_UP_DAYS
    if usable >= 455:
        train_days = 365
    else:
        train_days = min(usable - 5, max(5, (2 * usable) // 3))
    test_start = train_start + dt.timedelta(days=train_days)
    end = start + dt.timedelta(days=n_days - 1)
    if test_start > end:
        raise ConfigError("n_days too small to carve out a test range")
    return (train_start, test_start - dt.timedelta(days=1)), (test_start, end)


def generate_synthetic(config: SyntheticConfig):
    """Generate a synthetic dataset with planted parameters.

    Returns (dataset, planted_truth). The dataset's manifest carries the
    same planted_truth dictionary; it records every population quantity
    the estimation procedures should recover.
    """
    rng = np.random.default_rng(config.seed)
    rho = config.error_ar1_coeff
    phi = config.truth_ar1_coeff
    jitter_sd = config.spread_deflation * config.obs_noise_sd
    shared_scale = rho * _SHARED_ERROR_BASE

    n_hours = config.n_days * 24 + N_LEADS + 1
    dates = [_START_DATE + dt.timedelta(days=i) for i in range(config.n_days)]
    t_start = instant(_START_DATE, 0)

    site_cycle = (SiteType.COASTAL, SiteType.INLAND, SiteType.MOUNTAIN)
    stations = []
    forecasts = {}
    observations = {}

    hours_axis = np.arange(n_hours)
    hour_of_day = (hours_axis + 0) % 24
    day_of_year = np.array(
        [
            (_START_DATE + dt.timedelta(hours=int(h))).timetuple().tm_yday
            for h in hours_axis
        ]
    )
    diurnal = config.diurnal_amplitude * np.sin(
        2 * np.pi * (hour_of_day - (_DIURNAL_PEAK_HOUR - 6)) / 24.0
    )
    annual = _ANNUAL_AMPLITUDE * np.cos(
        2 * np.pi * (day_of_year - _ANNUAL_PEAK_DOY) / 365.0
    )

    for idx in range(config.n_stations):
        sid = f"S{idx + 1:02d}"
        site_type = site_cycle[idx % 3]
        station = Station(
            id=sid,
            site_type=site_type,
            latitude=float(round(50.0 + rng.uniform(0, 10), 4)),
            longitude=float(round(-8.0 + rng.uniform(0, 8), 4)),
            elevation=float(
                round({"coastal": 5, "inland": 120, "mountain": 900}[site_type.value]
                      + rng.uniform(0, 80), 1)
            ),
        )
        stations.append(station)

        base = rng.normal(_STATION_BASE_MEAN, _STATION_BASE_SD)
        innov = rng.normal(0.0, _WEATHER_SD * np.sqrt(1 - phi**2), n_hours)
        u = np.empty(n_hours)
        u[0] = rng.normal(0.0, _WEATHER_SD)
        for t in range(1, n_hours):
            u[t] = phi * u[t - 1] + innov[t]
        truth = base + annual + diurnal + u

        obs_values = truth + rng.normal(0.0, config.obs_noise_sd, n_hours)
        observations[sid] = ObservationSeries(
            sid, {int(t_start + t): float(obs_values[t]) for t in range(n_hours)}
        )

        lead_scale = shared_scale * (1.0 + _SHARED_ERROR_GROWTH * np.arange(N_LEADS))
        for date in dates:
            for init_hour in INIT_HOURS:
                cycle = CycleTime(date, init_hour)
                offset = cycle.init_instant - t_start
                z = np.empty(N_LEADS)
                z[0] = rng.normal()
                z_innov = rng.normal(0.0, np.sqrt(1 - rho**2), N_LEADS)
                for l in range(1, N_LEADS):
                    z[l] = rho * z[l - 1] + z_innov[l]
                eps = lead_scale * z
                jitter = rng.normal(0.0, jitter_sd, (N_MEMBERS, N_LEADS))
                center = truth[offset + 1 : offset + 1 + N_LEADS]
                members = center + config.forecast_bias + eps + jitter
                forecasts[(sid, cycle)] = TrajectoryForecast(sid, cycle, members)

    training_range, test_range = _split_ranges(_START_DATE, config.n_days)
    planted_truth = {
        "forecast_bias": config.forecast_bias,
        "error_ar1_coeff": rho,
        "error_correlation": "error_ar1_coeff ** |l1 - l2| (shared component)",
        "spread_deflation": config.spread_deflation,
        "obs_noise_sd": config.obs_noise_sd,
        "member_jitter_sd": jitter_sd,
        "shared_error_sd_lead1": shared_scale,
        "shared_error_growth_per_lead": _SHARED_ERROR_GROWTH,
        "weather_sd": _WEATHER_SD,
        "weather_hourly_ar1": phi,
        "diurnal_amplitude": config.diurnal_amplitude,
        "annual_amplitude": _ANNUAL_AMPLITUDE,
    }
    manifest = DatasetManifest(
        stations=stations,
        init_hours=INIT_HOURS,
        start_date=_START_DATE,
        end_date=dates[-1],
        training_range=training_range,
        test_range=test_range,
        provenance="synthetic",
        planted_truth=planted_truth,
    )
    dataset = Dataset(
        stations={s.id: s for s in stations},
        forecasts=forecasts,
        observations=observations,
        manifest=manifest,
    )
    return dataset, planted_truth


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(x))


def write_dataset(dataset: Dataset, out_dir: str) -> dict[str, str]:
    """Write forecasts.csv, observations.csv and manifest.json.

    Output is deterministic: rows are sorted and floats use shortest
    round-trip formatting, so identical datasets produce identical bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "forecasts": os.path.join(out_dir, FORECAST_FILE),
        "observations": os.path.join(out_dir, OBSERVATION_FILE),
        "manifest": os.path.join(out_dir, MANIFEST_FILE),
    }

    with open(paths["forecasts"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FORECAST_HEADER)
        for (sid, cycle) in sorted(
            dataset.forecasts, key=lambda k: (k[0], k[1].date, k[1].init_hour)
        ):
            fc = dataset.forecasts[(sid, cycle)]
            for lead in range(1, N_LEADS + 1):
                row = [sid, cycle.date.isoformat(), str(cycle.init_hour), str(lead)]
                row.extend(_fmt(v) for v in fc.members[:, lead - 1])
                writer.writerow(row)

    with open(paths["observations"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_OBS_HEADER)
        for sid in sorted(dataset.observations):
            for t, value in dataset.observations[sid].items():
                writer.writerow(
                    [sid, format_instant(t), "" if value is None else _fmt(value)]
                )

    manifest = dataset.manifest
    if manifest is not None:
        with open(paths["manifest"], "w") as fh:
            json.dump(manifest_to_dict(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return paths


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "provenance": manifest.provenance,
        "stations": [
            {
                "id": s.id,
                "site_type": s.site_type.value,
                "latitude": s.latitude,
                "longitude": s.longitude,
                "elevation": s.elevation,
            }
            for s in manifest.stations
        ],
        "init_hours": list(manifest.init_hours),
        "date_range": [manifest.start_date.isoformat(), manifest.end_date.isoformat()],
        "training_range": [d.isoformat() for d in manifest.training_range],
        "test_range": [d.isoformat() for d in manifest.test_range],
        "planted_truth": manifest.planted_truth,
    }


def manifest_from_dict(payload: dict) -> DatasetManifest:
    try:
        stations = [
            Station(
                id=s["id"],
                site_type=SiteType(s["site_type"]),
                latitude=float(s["latitude"]),
                longitude=float(s["longitude"]),
                elevation=float(s["elevation"]),
            )
            for s in payload["stations"]
        ]
        return DatasetManifest(
            stations=stations,
            init_hours=tuple(int(h) for h in payload["init_hours"]),
            start_date=dt.date.fromisoformat(payload["date_range"][0]),
            end_date=dt.date.fromisoformat(payload["date_range"][1]),
            training_range=tuple(
                dt.date.fromisoformat(d) for d in payload["training_range"]
            ),
            test_range=tuple(dt.date.fromisoformat(d) for d in payload["test_range"]),
            provenance=payload["provenance"],
            planted_truth=payload.get("planted_truth"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad manifest: {exc}") from None


def read_dataset(data_dir: str) -> Dataset:
    """Read a dataset directory written by write_dataset.

    Schema violations are reported with the offending row number.
    write_dataset followed by read_dataset is the identity on the
    in-memory representation.
    """
    forecasts = _read_forecasts(os.path.join(data_dir, FORECAST_FILE))
    observations = _read_observations(os.path.join(data_dir, OBSERVATION_FILE))
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    manifest = None
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = manifest_from_dict(json.load(fh))
    if manifest is not None:
        stations = {s.id: s for s in manifest.stations}
    else:
        ids = {sid for sid, _ in forecasts} | set(observations)
        stations = {
            sid: Station(sid, SiteType.INLAND, 0.0, 0.0, 0.0) for sid in sorted(ids)
        }
    return Dataset(
        stations=stations,
        forecasts=forecasts,
        observations=observations,
        manifest=manifest,
    )


def _read_forecasts(path: str):
    forecasts = {}
    pending: dict[tuple[str, CycleTime], dict[int, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return forecasts
        if header != _FORECAST_HEADER:
            raise DataError(f"{path}: bad header {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(_FORECAST_HEADER):
                raise DataError(
                    f"{path} row {line_no}: expected {len(_FORECAST_HEADER)} "
                    f"fields, got {len(row)}"
                )
            try:
                sid = row[0]
                cycle = CycleTime(dt.date.fromisoformat(row[1]), int(row[2]))
                lead = int(row[3])
                members = [float(v) for v in row[4:]]
            except (ValueError, ConfigError) as exc:
                raise DataError(f"{path} row {line_no}: {exc}") from None
            if not 1 <= lead <= N_LEADS:
                raise DataError(f"{path} row {line_no}: lead {lead} outside range")
            cell = pending.setdefault((sid, cycle), {})
            if lead in cell:
                raise DataError(f"{path} row {line_no}: duplicate lead {lead}")
            cell[lead] = members
    for (sid, cycle), columns in pending.items():
        if len(columns) != N_LEADS:
            missing = sorted(set(range(1, N_LEADS + 1)) - set(columns))
            raise DataError(
                f"{path}: forecast {sid} {cycle.date} {cycle.init_hour:02d}Z "
                f"missing leads {missing[:4]}..."
            )
        matrix = np.column_stack([columns[lead] for lead in range(1, N_LEADS + 1)])
        forecasts[(sid, cycle)] = TrajectoryForecast(sid, cycle, matrix)
    return forecasts


def _read_observations(path: str):
    series: dict[str, dict[int, Optional[float]]] = {}
    last_seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if header != _OBS_HEADER:
            raise DataError(f"{path}: bad header {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(
                    f"{path} row {line_no}: expected 3 fields, got {len(row)}"
                )
            sid, stamp, raw = row
            try:
                t = parse_instant(stamp)
            except DataError as exc:
                raise DataError(f"{path} row {line_no}: {exc}") from None
            prev = last_seen.get(sid)
            if prev is not None and t <= prev:
                raise DataError(
                    f"{path} row {line_no}: non-monotone timestamp for {sid}"
                )
            last_seen[sid] = t
            try:
                value = None if raw == "" else float(raw)
            except ValueError:
                raise DataError(f"{path} row {line_no}: bad value {raw!r}") from None
            series.setdefault(sid, {})[t] = value
    return {sid: ObservationSeries(sid, values) for sid, values in series.items()}
