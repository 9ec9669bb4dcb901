"""Experiment orchestration: config files, result tables and the ``predbn`` CLI."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import (
    MissingArtifactError,
    cmd_diagnose,
    cmd_eval,
    cmd_report,
    cmd_sweep_eps,
    cmd_train,
)
from .store import ResultStore

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MissingArtifactError",
    "ResultStore",
    "cmd_diagnose",
    "cmd_eval",
    "cmd_report",
    "cmd_sweep_eps",
    "cmd_train",
    "load_config",
    "parse_config",
]
