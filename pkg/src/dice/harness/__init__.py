"""Experiment harness: configs, runs, sweeps, ablations and summaries."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import ablation_matrix, run, run_seed, sweep_team_size
