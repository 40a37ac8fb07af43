"""Evaluation harness: metrics, the end-to-end synthetic pipeline, artifact
serialization and the command line interface."""

from .metrics import THRESHOLDS, EvalResult, evaluate, match_and_ap
from .pipeline import (
    ABLATION_ROWS,
    AblationResult,
    RunConfig,
    Toggles,
    ablate,
    config_from_dict,
    config_to_dict,
    run_pipeline,
    synth_v1,
)

__all__ = [
    "ABLATION_ROWS",
    "AblationResult",
    "EvalResult",
    "RunConfig",
    "THRESHOLDS",
    "Toggles",
    "ablate",
    "config_from_dict",
    "config_to_dict",
    "evaluate",
    "match_and_ap",
    "run_pipeline",
    "synth_v1",
]
