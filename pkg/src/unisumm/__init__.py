"""Prefix-tuned encoder-decoder summarization with multi-task pre-training."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
    StateError,
    UniSummError,
    UnknownTaskError,
)
from .model import UNIVERSAL, ModelConfig, PrefixBank, PrefixParams, build_model, generate  # noqa: E402
from .training import OptimizerConfig, TaskRegistry, pretrain  # noqa: E402
from .tuning import InitStrategy, TuneConfig, prefix_tune, verify_frozen  # noqa: E402
from .harness import BenchSettings, run_benchmark, sample_shot_sets  # noqa: E402
from .estimators import PrefixTuningSummarizer, UniSummPretrainer  # noqa: E402

__all__ = [
    "UNIVERSAL", "BenchSettings", "CheckpointError", "ConfigError", "ContractError", "DataError",
    "DimensionError", "InitStrategy", "ModelConfig", "NumericalError", "OptimizerConfig",
    "PrefixBank", "PrefixParams", "PrefixTuningSummarizer", "StateError", "TaskRegistry",
    "TuneConfig", "UniSummError", "UniSummPretrainer", "UnknownTaskError", "build_model",
    "generate", "prefix_tune", "pretrain", "run_benchmark", "sample_shot_sets", "verify_frozen",
]
