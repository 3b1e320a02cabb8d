import numpy as np
import pytest

from raftkit.cycle import CyclePolicy, replay
from raftkit.emos import train_rolling_emos
from raftkit.ingest import SyntheticConfig, generate_synthetic
from raftkit.raft import compute_errors, train_raft
from raftkit.verify import build_case_table


@pytest.fixture(scope="session")
def small_dataset():
    """Underdispersed, biased dataset at smoke scale."""
    config = SyntheticConfig(
        seed=101, n_stations=2, n_days=100, forecast_bias=0.5,
        spread_deflation=0.7, error_ar1_coeff=0.8, obs_noise_sd=0.3,
    )
    dataset, planted = generate_synthetic(config)
    return dataset, planted


@pytest.fixture(scope="session")
def small_pipeline(small_dataset):
    """Trained models and replays shared by the cycle/verify/report tests."""
    dataset, planted = small_dataset
    manifest = dataset.manifest
    dates = manifest.dates_in((manifest.training_range[0], manifest.test_range[1]))
    store = train_rolling_emos(dataset, dates)
    panels = [
        compute_errors(dataset, store, station, init_hour,
                       manifest.dates_in(manifest.training_range))
        for station in dataset.station_ids()
        for init_hour in manifest.init_hours
    ]
    model = train_raft(panels)
    ledger_full = replay(
        dataset, store, model, CyclePolicy(mode="raft_full"),
        date_range=manifest.test_range,
    )
    ledger_emos = replay(
        dataset, store, model, CyclePolicy(mode="emos_only"),
        date_range=manifest.test_range,
    )
    return {
        "dataset": dataset,
        "planted": planted,
        "store": store,
        "model": model,
        "panels": panels,
        "ledger_full": ledger_full,
        "ledger_emos": ledger_emos,
        "table": build_case_table(ledger_full, dataset),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
