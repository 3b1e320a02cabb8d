"""Ensemble temperature trajectory post-processing and rapid adjustment.

The pipeline: generate or load a dataset (`ingest`), fit the local
Gaussian post-processing per cell (`emos`), learn the lead-time error
structure and adjustment periods (`raft`), replay the operational cycle
(`cycle`) and score everything (`verify`). The `raftkit` CLI wires the
stages together through files.
"""

from .core import (
    ConfigError,
    CycleTime,
    DataError,
    Dataset,
    EnsembleStats,
    InsufficientDataError,
    MissingDataError,
    ObservationSeries,
    RaftkitError,
    SiteType,
    Station,
    TrajectoryForecast,
    ensemble_stats,
    next_day_run,
    previous_day_run,
    valid_time,
)
from .emos import (
    EmosParams,
    EmosParamStore,
    GaussianForecast,
    crps_gaussian,
    fit_emos,
    predict_emos,
    rolling_fit,
    train_rolling_emos,
)
from .ingest import (
    DatasetManifest,
    SyntheticConfig,
    generate_synthetic,
    read_dataset,
    write_dataset,
)
from .raft import (
    AdjustmentPlan,
    ErrorPanel,
    ForecastError,
    LiveTrajectory,
    RaftLink,
    RaftModel,
    apply_adjustment,
    compute_errors,
    error_correlation_matrix,
    fit_link,
    select_adjustment_period,
    step_clock,
    train_raft,
)
from .cycle import CycleLedger, CyclePolicy, replay, run_comparison
from .verify import (
    CaseTable,
    Histogram,
    ScoreSlice,
    VerificationReport,
    aggregate,
    bootstrap_ci,
    build_case_table,
    coverage_envelope,
    coverage_gaussian,
    crps_ensemble,
    pit,
    pit_histogram,
    rank,
    rank_histogram,
    rmse,
    skill_score,
)

__version__ = "0.1.0"
