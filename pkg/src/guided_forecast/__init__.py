"""Seasonal epidemic forecasting under expert guidance with high-confidence safety tests."""

from .data import (
    DataSplit,
    PredictionTask,
    Season,
    SeasonSet,
    ingest_wili,
    split,
    synth_seasons,
    write_wili,
)
from .forecaster import Arch, ForecastModel, TrainConfig, forward, init_model, task_loss
from .guidance import Guidance, ZSample, collect_z, failure_rate, z_regional, z_smooth
from .modes import AutoGuidanceSpec, automatic_guidance, direct_guidance, weekly_sweep
from .seldonian import (
    RunOutcome,
    SeldonianConfig,
    predicted_bound,
    safety_test,
    select_candidate,
    upper_bound,
)

__version__ = "0.1.0"
