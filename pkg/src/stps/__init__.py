"""Partial-sensing long-term traffic forecasting with rank-based embeddings."""

from .dataio import (Normalizer, RoadGraph, SensingPartition, TrafficTable, WindowSample,
                     chronological_split, fit_normalizer, generate_synthetic, inject_noise,
                     load_adjacency, load_traffic_table, make_windows, select_locations)
from .metrics import MetricsReport, binned_improvement, build_report, metric_at
from .pipeline import (ModelConfig, StpsModel, checkpoint_load, checkpoint_save, evaluate, fit,
                       infer, prepare_dataset, train_stage)

__version__ = "0.1.0"
