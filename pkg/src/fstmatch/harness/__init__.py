"""Experiment configs, pipelines, reports, external scorers and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .pipelines import (attribute, run_fst_comparison, run_hypothesis1, run_hypothesis2,
                        run_hypothesis3, run_instability)
from .report import ExperimentReport
