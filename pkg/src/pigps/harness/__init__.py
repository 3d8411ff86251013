"""Experiment plumbing: configs, seeded runs, metric files and comparison reports."""
from .config import SCHEMA, ConfigError, ExperimentConfig, apply_overrides, load, loads, parse
from .report import CompareError, compare
from .runner import load_checkpoint, read_metrics, run_experiment

__all__ = [
    "SCHEMA", "CompareError", "ConfigError", "ExperimentConfig", "apply_overrides", "compare",
    "load", "load_checkpoint", "loads", "parse", "read_metrics", "run_experiment",
]
