import datetime as dt

import numpy as np
import pytest

from raftkit.core import (
    ConfigError,
    CycleTime,
    DataError,
    MissingDataError,
    TrajectoryForecast,
    ensemble_stats,
    format_instant,
    instant_to_datetime,
    member_stats,
    next_day_run,
    parse_instant,
    previous_day_run,
    valid_time,
)


def make_forecast(members=None, station="S01", date=dt.date(2016, 1, 14), init_hour=3):
    if members is None:
        members = np.full((12, 36), 5.0)
    return TrajectoryForecast(station, CycleTime(date, init_hour), members)


class TestEnsembleStats:
    def test_zero_spread(self):
        stats = ensemble_stats(make_forecast(), lead=7)
        assert stats.mean == 5.0
        assert stats.variance == 0.0

    def test_two_member_fixture_population_divisor(self):
        stats = member_stats(np.array([0.0, 2.0]))
        assert stats.mean == 1.0
        assert stats.variance == 1.0  # divisor m, not m-1

    def test_law_of_large_numbers(self, rng):
        mu, sigma = 3.0, 1.7
        draws = mu + sigma * rng.standard_normal(200_000)
        stats = member_stats(draws)
        assert abs(stats.mean - mu) < 0.02
        assert abs(stats.variance - sigma**2) < 0.05

    def test_permutation_invariance(self, rng):
        members = rng.normal(10, 2, (12, 36))
        fc = make_forecast(members)
        base = ensemble_stats(fc, 12)
        for _ in range(5):
            shuffled = make_forecast(members[rng.permutation(12)])
            stats = ensemble_stats(shuffled, 12)
            assert stats.mean == pytest.approx(base.mean, abs=1e-12)
            assert stats.variance == pytest.approx(base.variance, abs=1e-12)

    def test_missing_lead_rejected(self):
        fc = make_forecast()
        with pytest.raises(MissingDataError):
            ensemble_stats(fc, 0)
        with pytest.raises(MissingDataError):
            ensemble_stats(fc, 37)

    def test_non_finite_members_rejected(self):
        members = np.full((12, 36), 5.0)
        members[3, 10] = np.nan
        with pytest.raises(DataError):
            make_forecast(members)

    def test_wrong_shape_rejected(self):
        with pytest.raises(DataError):
            make_forecast(np.zeros((11, 36)))

    def test_members_frozen(self):
        fc = make_forecast()
        with pytest.raises(ValueError):
            fc.members[0, 0] = 1.0


class TestTimeArithmetic:
    def test_snapshot_instant(self):
        # run initialized 20 hours before 2016-01-14 23:00 UTC
        cycle = CycleTime(dt.date(2016, 1, 14), 3)
        t = valid_time(cycle, 20)
        assert instant_to_datetime(t) == dt.datetime(2016, 1, 14, 23)

    def test_day_rollover(self):
        cycle = CycleTime(dt.date(2016, 1, 14), 21)
        assert instant_to_datetime(valid_time(cycle, 3)) == dt.datetime(2016, 1, 15, 0)

    def test_lead36_from_0300(self):
        cycle = CycleTime(dt.date(2016, 1, 14), 3)
        assert instant_to_datetime(valid_time(cycle, 36)) == dt.datetime(2016, 1, 15, 15)

    def test_valid_time_monotone_in_lead(self):
        cycle = CycleTime(dt.date(2015, 6, 1), 9)
        times = [valid_time(cycle, lead) for lead in range(1, 37)]
        assert all(a < b for a, b in zip(times, times[1:]))

    def test_same_day_cycles_six_hours_apart(self):
        day = dt.date(2015, 6, 1)
        instants = [CycleTime(day, h).init_instant for h in (3, 9, 15, 21)]
        assert [b - a for a, b in zip(instants, instants[1:])] == [6, 6, 6]

    def test_cycle_ordering(self):
        a = CycleTime(dt.date(2015, 6, 1), 21)
        b = CycleTime(dt.date(2015, 6, 2), 3)
        assert a < b
        assert CycleTime(dt.date(2015, 6, 1), 3) < a

    def test_bad_init_hour(self):
        with pytest.raises(ConfigError):
            CycleTime(dt.date(2015, 6, 1), 12)

    def test_instant_text_round_trip(self):
        t = valid_time(CycleTime(dt.date(2016, 1, 14), 3), 20)
        assert format_instant(t) == "2016-01-14T23:00:00Z"
        assert parse_instant(format_instant(t)) == t

    def test_sub_hourly_timestamp_rejected(self):
        with pytest.raises(DataError):
            parse_instant("2016-01-14T23:30:00Z")


class TestDayRuns:
    def test_previous_day(self):
        assert previous_day_run(CycleTime(dt.date(2016, 1, 14), 3)) == CycleTime(
            dt.date(2016, 1, 13), 3
        )

    def test_year_rollover(self):
        assert previous_day_run(CycleTime(dt.date(2016, 1, 1), 21)) == CycleTime(
            dt.date(2015, 12, 31), 21
        )

    def test_round_trip(self):
        cycle = CycleTime(dt.date(2016, 2, 29), 15)
        assert next_day_run(previous_day_run(cycle)) == cycle
