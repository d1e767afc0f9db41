"""Multi-task forecasting of correlated cloud workload series."""

from .baselines import MLPForecaster, PersistenceForecaster, baseline_persistence
from .data import (AlignedSeries, OutlierClipper, SeriesScaler, SynthConfig, align, ingest_csv,
                   load_series, prepare, save_series, split, synth_generate, window)
from .errors import CloudcastError, ConfigError, DataError, NumericFailure, ShapeError
from .evaluation import (build_report, evaluate, mae, mape, mse, rmae, sweep_hidden,
                         sweep_horizon, ablation_suite)
from .model import GraphForecaster, ModelConfig, TrainConfig, load_model, save_model, train
from .structure import AdjacencyMatrix, adjacency_from_correlation, adjacency_from_topology

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix", "AlignedSeries", "CloudcastError", "ConfigError", "DataError",
    "GraphForecaster", "MLPForecaster", "ModelConfig", "NumericFailure", "OutlierClipper",
    "PersistenceForecaster", "SeriesScaler", "ShapeError", "SynthConfig", "TrainConfig",
    "ablation_suite", "adjacency_from_correlation", "adjacency_from_topology", "align",
    "baseline_persistence", "build_report", "evaluate", "ingest_csv", "load_model",
    "load_series", "mae", "mape", "mse", "prepare", "rmae", "save_model", "save_series",
    "split", "sweep_hidden", "sweep_horizon", "synth_generate", "train", "window",
]
