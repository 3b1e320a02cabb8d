"""Domain types, time indexing and the in-memory dataset store.

All timestamps are UTC. Instants are plain integers counting hours since
1970-01-01 00:00, which keeps cycle/lead arithmetic exact and hashable.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Optional

import numpy as np

N_MEMBERS = 12
N_LEADS = 36
INIT_HOURS = (3, 9, 15, 21)

_EPOCH_ORDINAL = dt.date(1970, 1, 1).toordinal()


class RaftkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RaftkitError):
    """Invalid configuration or invalid argument combination."""


class DataError(RaftkitError):
    """Malformed external data (schema violations, inconsistent files)."""


class MissingDataError(RaftkitError):
    """A forecast or observation required by an operation is absent."""


class InsufficientDataError(MissingDataError):
    """Too few training pairs for an estimation procedure."""


class SiteType(str, Enum):
    COASTAL = "coastal"
    INLAND = "inland"
    MOUNTAIN = "mountain"


@dataclass(frozen=True)
class Station:
    """Observation site metadata.

    Attributes:
        id: unique identifier within a dataset
        site_type: one of coastal, inland, mountain
        latitude, longitude: degrees
        elevation: meters above sea level
    """

    id: str
    site_type: SiteType
    latitude: float
    longitude: float
    elevation: float

    def __post_init__(self):
        object.__setattr__(self, "site_type", SiteType(self.site_type))


@dataclass(frozen=True, order=True)
class CycleTime:
    """One model initialization: a calendar date plus one of the four
    daily init hours. Ordering is lexicographic in (date, init_hour)."""

    date: dt.date
    init_hour: int

    def __post_init__(self):
        if self.init_hour not in INIT_HOURS:
            raise ConfigError(
                f"init_hour must be one of {INIT_HOURS}, got {self.init_hour}"
            )

    @property
    def init_instant(self) -> int:
        """Hours since epoch of the initialization time."""
        return (self.date.toordinal() - _EPOCH_ORDINAL) * 24 + self.init_hour


def instant(date: dt.date, hour: int) -> int:
    """Hours since epoch for a date plus an hour-of-day (may exceed 23)."""
    return (date.toordinal() - _EPOCH_ORDINAL) * 24 + hour


def instant_to_datetime(t: int) -> dt.datetime:
    days, hour = divmod(t, 24)
    return dt.datetime.combine(
        dt.date.fromordinal(days + _EPOCH_ORDINAL), dt.time(hour)
    )


def format_instant(t: int) -> str:
    """ISO-8601 UTC string for an instant, e.g. 2016-01-14T23:00:00Z."""
    return instant_to_datetime(t).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_instant(text: str) -> int:
    try:
        parsed = dt.datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    except ValueError as exc:
        raise DataError(f"bad timestamp {text!r}: {exc}") from None
    if parsed.minute or parsed.second:
        raise DataError(f"timestamps must fall on the hour, got {text!r}")
    return instant(parsed.date(), parsed.hour)


def valid_time(cycle: CycleTime, lead: int) -> int:
    """Instant at which the forecast for `lead` hours ahead verifies."""
    return cycle.init_instant + lead


def previous_day_run(cycle: CycleTime) -> CycleTime:
    """The run initialized 24 hours earlier (same init hour, previous date)."""
    return CycleTime(cycle.date - dt.timedelta(days=1), cycle.init_hour)


def next_day_run(cycle: CycleTime) -> CycleTime:
    return CycleTime(cycle.date + dt.timedelta(days=1), cycle.init_hour)


@dataclass(frozen=True)
class EnsembleStats:
    """Ensemble mean and variance at one lead time.

    The variance uses the population divisor m (the member count), so a
    zero-spread ensemble has variance exactly 0.
    """

    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")


def member_stats(values: np.ndarray) -> EnsembleStats:
    """Mean and population variance (divisor m) of one member vector."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("member vector must be 1-D and non-empty")
    if not np.all(np.isfinite(arr)):
        raise MissingDataError("member vector contains non-finite values")
    return EnsembleStats(mean=float(arr.mean()), variance=float(arr.var()))


class TrajectoryForecast:
    """One model run's hourly ensemble trajectory for one station.

    `members` is a (12, 36) matrix: 12 exchangeable members by 36 hourly
    lead times, degrees Celsius. The matrix is copied and frozen at
    construction; member order carries no information.
    """

    __slots__ = ("station", "cycle", "members")

    def __init__(self, station: str, cycle: CycleTime, members):
        arr = np.array(members, dtype=float)
        if arr.shape != (N_MEMBERS, N_LEADS):
            raise DataError(
                f"members must have shape ({N_MEMBERS}, {N_LEADS}), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("forecast members must all be finite")
        arr.setflags(write=False)
        self.station = station
        self.cycle = cycle
        self.members = arr

    def member_column(self, lead: int) -> np.ndarray:
        if not 1 <= lead <= N_LEADS:
            raise MissingDataError(f"lead {lead} outside [1, {N_LEADS}]")
        return self.members[:, lead - 1]

    def __repr__(self):
        return f"TrajectoryForecast({self.station!r}, {self.cycle!r})"


def ensemble_stats(forecast: TrajectoryForecast, lead: int) -> EnsembleStats:
    """Ensemble mean and variance of a forecast at one lead time.

    Raises MissingDataError if the lead time is outside the trajectory.
    """
    return member_stats(forecast.member_column(lead))


class ObservationSeries:
    """Hourly observations for one station, keyed by instant.

    Missing observations are first class: a key mapped to None records
    that the instant was reported but had no usable value. `get` returns
    None both for explicitly missing and for absent instants.
    """

    __slots__ = ("station", "_values")

    def __init__(self, station: str, values: Mapping[int, Optional[float]]):
        self.station = station
        self._values = dict(sorted(values.items()))

    def get(self, t: int) -> Optional[float]:
        return self._values.get(t)

    def instants(self) -> Iterator[int]:
        return iter(self._values)

    def items(self) -> Iterator[tuple[int, Optional[float]]]:
        return iter(self._values.items())

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"ObservationSeries({self.station!r}, n={len(self)})"


@dataclass
class Dataset:
    """In-memory store shared by training, replay and verification.

    All contained values are immutable after construction, so a Dataset
    can be shared across parallel workers without synchronization.
    """

    stations: dict[str, Station] = field(default_factory=dict)
    forecasts: dict[tuple[str, CycleTime], TrajectoryForecast] = field(
        default_factory=dict
    )
    observations: dict[str, ObservationSeries] = field(default_factory=dict)
    manifest: object = None

    def station_ids(self) -> list[str]:
        return sorted(self.stations)

    def forecast(self, station: str, cycle: CycleTime) -> TrajectoryForecast:
        try:
            return self.forecasts[(station, cycle)]
        except KeyError:
            raise MissingDataError(f"no forecast for {station} at {cycle}") from None

    def has_forecast(self, station: str, cycle: CycleTime) -> bool:
        return (station, cycle) in self.forecasts

    def observation(self, station: str, t: int) -> Optional[float]:
        series = self.observations.get(station)
        return None if series is None else series.get(t)

    def cycles(self, station: Optional[str] = None, init_hour: Optional[int] = None):
        """Sorted cycle times present in the forecast store."""
        seen = set()
        for (st, cyc) in self.forecasts:
            if station is not None and st != station:
                continue
            if init_hour is not None and cyc.init_hour != init_hour:
                continue
            seen.add(cyc)
        return sorted(seen)

    def date_range(self) -> tuple[dt.date, dt.date]:
        cycles = self.cycles()
        if not cycles:
            raise MissingDataError("dataset contains no forecasts")
        return cycles[0].date, cycles[-1].date
