"""Configuration-driven experiment runner and verification suite."""
from .config import PRESETS, ExperimentConfig, build_config, load_config
from .runner import run_experiment, sweep
from .verify import run_checks

__all__ = ["PRESETS", "ExperimentConfig", "build_config", "load_config", "run_experiment",
           "sweep", "run_checks"]
