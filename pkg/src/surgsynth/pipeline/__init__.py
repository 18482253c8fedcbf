"""Experiment orchestration: config, manifest, seeds, stages, figures and the CLI."""

from .config import DEFAULTS, config_hash, load_config, validate_config
from .figures import emit_figure_grid, figure_grid
from .manifest import STAGES, ExperimentManifest, StageRecord
from .seeds import derive_seed
from .stages import ARTIFACT_ROOT_ENV, experiment_dir, run_pipeline, run_stage

__all__ = [
    "ARTIFACT_ROOT_ENV",
    "DEFAULTS",
    "STAGES",
    "ExperimentManifest",
    "StageRecord",
    "config_hash",
    "derive_seed",
    "emit_figure_grid",
    "experiment_dir",
    "figure_grid",
    "load_config",
    "run_pipeline",
    "run_stage",
    "validate_config",
]
