import datetime as dt
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad
from scipy.optimize import minimize

from raftkit.core import EnsembleStats, InsufficientDataError
from raftkit.emos import (
    DEFAULT_INIT,
    EmosParams,
    EmosParamStore,
    _mean_crps_objective,
    crps_gaussian,
    fit_emos,
    nelder_mead_batch,
    predict_emos,
    rolling_fit,
    rolling_window,
    train_rolling_emos,
)
from raftkit.ingest import SyntheticConfig, generate_synthetic


def crps_by_integration(mu, sigma, y):
    """Independent oracle: squared area between the forecast CDF and the
    observation's step function, by adaptive quadrature."""

    def integrand(x):
        return (stats.norm.cdf(x, mu, sigma) - (y <= x)) ** 2

    lo = min(mu, y) - 14 * sigma
    hi = max(mu, y) + 14 * sigma
    left, _ = quad(integrand, lo, y, epsabs=1e-10, epsrel=1e-10, limit=300)
    right, _ = quad(integrand, y, hi, epsabs=1e-10, epsrel=1e-10, limit=300)
    return left + right


def planted_pairs(rng, n, a=2.0, b2=1.0, c2=1.0, d2=0.5):
    xbar = rng.normal(10, 5, n)
    s2 = rng.gamma(2.0, 1.5, n)  # wide spread keeps c2/d2 separately identified
    y = rng.normal(a + b2 * xbar, np.sqrt(c2 + d2 * s2))
    return xbar, s2, y


def pairs_list(xbar, s2, y):
    return [(EnsembleStats(m, v), obs) for m, v, obs in zip(xbar, s2, y)]


class TestCrpsGaussian:
    def test_standard_normal_at_zero(self):
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-5)

    def test_scale_equivariance(self):
        z = 0.73
        base = crps_gaussian(0.0, 1.0, z)
        assert crps_gaussian(5.0, 2.0, 5.0 + 2.0 * z) == pytest.approx(2 * base, rel=1e-12)

    def test_tail_limit(self):
        mu, sigma = 1.0, 2.0
        y = mu + 8 * sigma
        score = crps_gaussian(mu, sigma, y)
        # limit |y - mu| - sigma/sqrt(pi), exponentially small remainder
        assert score == pytest.approx(abs(y - mu) - sigma / math.sqrt(math.pi), abs=1e-8)
        assert score / abs(y - mu) == pytest.approx(1.0, abs=0.08)
        assert score == pytest.approx(crps_by_integration(mu, sigma, y), abs=1e-6)

    def test_matches_integration_spot(self):
        for mu, sigma, y in [(0, 1, 0.4), (3, 0.5, 2.0), (-2, 4, 6.0)]:
            assert crps_gaussian(mu, sigma, y) == pytest.approx(
                crps_by_integration(mu, sigma, y), abs=1e-6
            )

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            crps_gaussian(0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            crps_gaussian(0.0, -1.0, 1.0)

    def test_nonnegative_vectorized(self, rng):
        mu = rng.normal(0, 5, 1000)
        sigma = rng.uniform(0.1, 5, 1000)
        y = rng.normal(0, 5, 1000)
        assert np.all(crps_gaussian(mu, sigma, y) >= 0)

    def test_propriety_spot_check(self, rng):
        mu_true, sigma_true = 1.0, 1.5
        y = rng.normal(mu_true, sigma_true, 40_000)
        best = crps_gaussian(mu_true, sigma_true, y).mean()
        for dmu in (-0.3, -0.15, 0.15, 0.3):
            assert crps_gaussian(mu_true + dmu, sigma_true, y).mean() > best
        for dsig in (-0.3, -0.15, 0.15, 0.3):
            assert crps_gaussian(mu_true, sigma_true + dsig, y).mean() > best


class TestNelderMeadBatch:
    def test_matches_scipy_on_crps_cells(self, rng):
        n_cells, W = 6, 60
        xbar = rng.normal(8, 4, (n_cells, W))
        s2 = rng.gamma(4, 0.5, (n_cells, W))
        y = rng.normal(1.0 + xbar, np.sqrt(0.8 + 0.4 * s2))
        mask = np.ones_like(y, dtype=bool)
        objective = _mean_crps_objective(
            xbar, s2, y, mask.astype(float), mask.sum(axis=1)
        )
        x0 = np.tile(np.array(DEFAULT_INIT), (n_cells, 1))
        best, f_best, _ = nelder_mead_batch(objective, x0)
        for i in range(n_cells):
            def single(p, i=i):
                return float(objective(p.reshape(1, 1, 4), np.array([i]))[0, 0])

            res = minimize(
                single, x0[i], method="Nelder-Mead",
                options=dict(fatol=1e-10, xatol=1e-8, maxiter=3000),
            )
            assert f_best[i] == pytest.approx(res.fun, abs=5e-6)

    def test_never_worse_than_start(self, rng):
        def fun(P, rows=None):
            return np.sum((P - 3.0) ** 2, axis=-1)

        x0 = rng.normal(0, 1, (5, 4))
        best, f_best, _ = nelder_mead_batch(fun, x0)
        assert np.all(f_best <= fun(x0) + 1e-12)
        assert np.allclose(best, 3.0, atol=1e-3)


class TestFitEmos:
    def test_planted_recovery(self, rng):
        xbar, s2, y = planted_pairs(rng, 4000)
        params = fit_emos(pairs_list(xbar, s2, y))
        assert params.a == pytest.approx(2.0, abs=0.15)
        assert params.b2 == pytest.approx(1.0, abs=0.05)
        assert params.c2 == pytest.approx(1.0, abs=0.2)
        assert params.d2 == pytest.approx(0.5, abs=0.15)

    def test_degenerate_perfect_predictor(self, rng):
        xbar = rng.normal(10, 5, 100)
        pairs = [(EnsembleStats(m, 0.0), m) for m in xbar]  # y == xbar, S2 == 0
        params = fit_emos(pairs)
        fitted = crps_gaussian(
            params.a + params.b2 * xbar, math.sqrt(params.c2), xbar
        ).mean()
        # raw ensemble mean with any fixed sigma >= 1 scores 0.2337 * sigma
        assert fitted < crps_gaussian(xbar, 1.0, xbar).mean()

    def test_fixed_point_start(self, rng):
        xbar, s2, y = planted_pairs(rng, 8000)
        start = (2.0, 1.0, 1.0, math.sqrt(0.5))
        params = fit_emos(pairs_list(xbar, s2, y), init=start)
        assert params.a == pytest.approx(start[0], abs=0.2)
        assert params.b2 == pytest.approx(1.0, abs=0.05)

    def test_sign_flip_invariance_of_objective(self, rng):
        xbar, s2, y = planted_pairs(rng, 50)
        mask = np.ones((1, 50))
        objective = _mean_crps_objective(
            xbar[None], s2[None], y[None], mask, mask.sum(axis=1)
        )
        p = np.array([[[0.5, 1.2, 0.7, 0.9]]])
        for flip in ([1, -1, 1, 1], [1, 1, -1, 1], [1, 1, 1, -1], [1, -1, -1, -1]):
            flipped = p * np.array(flip)
            assert objective(flipped, None)[0, 0] == objective(p, None)[0, 0]

    def test_canonical_nonnegative_coefficients(self, rng):
        xbar, s2, y = planted_pairs(rng, 600)
        params = fit_emos(pairs_list(xbar, s2, y), init=(0.0, -1.0, -0.5, -1.0))
        assert params.b >= 0 and params.c >= 0 and params.d >= 0

    def test_insufficient_pairs(self, rng):
        xbar, s2, y = planted_pairs(rng, 10)
        with pytest.raises(InsufficientDataError):
            fit_emos(pairs_list(xbar, s2, y))

    def test_affine_equivariance_of_refit(self, rng):
        xbar, s2, y = planted_pairs(rng, 3000)
        delta = 7.3
        p1 = fit_emos(pairs_list(xbar, s2, y))
        p2 = fit_emos(pairs_list(xbar + delta, s2, y + delta))
        q = EnsembleStats(12.0, 1.5)
        q_shifted = EnsembleStats(12.0 + delta, 1.5)
        mu1 = predict_emos(p1, q).mu
        mu2 = predict_emos(p2, q_shifted).mu
        assert mu2 - mu1 == pytest.approx(delta, abs=0.05)


class TestPredict:
    def test_identity_mean(self):
        params = EmosParams(a=0.0, b=1.0, c=1.0, d=0.0)
        fc = predict_emos(params, EnsembleStats(7.3, 2.0))
        assert fc.mu == pytest.approx(7.3)

    def test_constant_variance(self):
        params = EmosParams(a=0.0, b=1.0, c=1.0, d=0.0)
        for s2 in (0.0, 1.0, 9.0):
            assert predict_emos(params, EnsembleStats(0.0, s2)).sigma2 == 1.0

    def test_zero_variance_params_rejected(self):
        with pytest.raises(ValueError):
            EmosParams(a=0.0, b=1.0, c=0.0, d=0.0)

    def test_calibration_of_planted_fit(self, rng):
        xbar, s2, y = planted_pairs(rng, 10_000)
        params = fit_emos(pairs_list(xbar, s2, y))
        xb_h, s2_h, y_h = planted_pairs(rng, 4000)
        mu = params.a + params.b2 * xb_h
        sig = np.sqrt(params.c2 + params.d2 * s2_h)
        pit_values = stats.norm.cdf((y_h - mu) / sig)
        assert stats.kstest(pit_values, "uniform").pvalue > 0.05


@pytest.fixture(scope="module")
def dataset():
    config = SyntheticConfig(seed=31, n_stations=2, n_days=60)
    return generate_synthetic(config)[0]


class TestRollingWindow:

    def test_window_is_40_days_strictly_before(self):
        as_of = dt.date(2014, 3, 1)
        lo, hi = rolling_window(as_of)
        assert (as_of - lo).days == 40
        assert (as_of - hi).days == 1

    def test_n_train_bounded_by_window(self, dataset):
        as_of = dataset.manifest.test_range[0]
        params = rolling_fit(dataset, ("S01", 3, 10), as_of)
        assert 30 <= params.n_train <= 40
        assert params.window == rolling_window(as_of)

    def test_spin_up_supports_first_training_day(self, dataset):
        # first post-spin-up date trains entirely on spin-up days
        as_of = dataset.manifest.training_range[0]
        params = rolling_fit(dataset, ("S01", 3, 10), as_of)
        assert params.n_train == 40

    def test_cell_independence(self, dataset):
        as_of = dataset.manifest.test_range[0]
        before = rolling_fit(dataset, ("S01", 3, 10), as_of)
        # drop the other station's observations entirely
        import copy

        mutated = copy.copy(dataset)
        mutated.observations = {
            k: v for k, v in dataset.observations.items() if k == "S01"
        }
        after = rolling_fit(mutated, ("S01", 3, 10), as_of)
        assert (before.a, before.b, before.c, before.d) == (
            after.a, after.b, after.c, after.d,
        )

    def test_insufficient_data_raises(self, dataset):
        with pytest.raises(InsufficientDataError):
            # before the dataset starts there are no pairs at all
            rolling_fit(dataset, ("S01", 3, 10), dt.date(2013, 12, 1))


class TestRollingTrainer:
    def test_carry_and_fallback_sources(self):
        config = SyntheticConfig(seed=13, n_stations=1, n_days=55)
        dataset, _ = generate_synthetic(config)
        # remove all observations: no cell can ever fit
        dataset.observations = {}
        dates = dataset.manifest.dates_in(dataset.manifest.test_range)
        store = train_rolling_emos(dataset, dates)
        params = store.get("S01", 3, 5, dates[0])
        assert params.source == "fallback"
        assert params.d == 0.0 and params.b == 1.0

    def test_deterministic_across_runs(self, small_dataset):
        dataset, _ = small_dataset
        dates = dataset.manifest.dates_in(dataset.manifest.test_range)[:3]
        s1 = train_rolling_emos(dataset, dates)
        s2 = train_rolling_emos(dataset, dates)
        for (k1, p1), (k2, p2) in zip(s1.records(), s2.records()):
            assert k1 == k2
            assert (p1.a, p1.b, p1.c, p1.d) == (p2.a, p2.b, p2.c, p2.d)

    def test_worker_count_does_not_change_results(self, small_dataset):
        dataset, _ = small_dataset
        dates = dataset.manifest.dates_in(dataset.manifest.test_range)[:3]
        serial = train_rolling_emos(dataset, dates, workers=1)
        parallel = train_rolling_emos(dataset, dates, workers=2)
        assert len(serial) == len(parallel)
        for (k1, p1), (k2, p2) in zip(serial.records(), parallel.records()):
            assert k1 == k2
            assert (p1.a, p1.b, p1.c, p1.d) == (p2.a, p2.b, p2.c, p2.d)

    def test_store_json_round_trip(self, tmp_path, small_dataset):
        dataset, _ = small_dataset
        dates = dataset.manifest.dates_in(dataset.manifest.test_range)[:2]
        store = train_rolling_emos(dataset, dates)
        path = tmp_path / "emos_params.json"
        store.to_json(str(path))
        back = EmosParamStore.from_json(str(path))
        assert len(back) == len(store)
        for (k1, p1), (k2, p2) in zip(store.records(), back.records()):
            assert k1 == k2
            assert (p1.a, p1.b, p1.c, p1.d, p1.n_train, p1.window, p1.source) == (
                p2.a, p2.b, p2.c, p2.d, p2.n_train, p2.window, p2.source,
            )
