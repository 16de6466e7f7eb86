"""Masked low-rank sub-experts for continual learning on a small frozen transformer."""

from .adapters import AdapterConfig, MoSELayerState, ScoreMask, count_trainable, lora_forward, moe_forward, mose_forward
from .backbone import BackboneConfig, FrozenBackbone, build_backbone, forward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, parse_config_text
from .errors import (CheckpointError, ChecksumError, ConfigError, ContractError, ParseError, SubExpertsError,
                     TrainingError, TruncatedError, VersionError)
from .metrics import AccuracyMatrix, average_performance, backward_transfer, parameter_growth
from .prompts import PromptPool, TaskKeySet, match_task, pull_loss
from .suite import SuiteConfig, SyntheticTask, generate_suite
from .trainer import ContinualLearner, PromptConfig, RunState, TrainConfig, run, run_joint, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "AdapterConfig", "BackboneConfig", "CheckpointError", "ChecksumError", "ConfigError",
    "ContinualLearner", "ContractError", "FrozenBackbone", "MoSELayerState", "ParseError", "PromptConfig",
    "PromptPool", "RunConfig", "RunState", "ScoreMask", "SubExpertsError", "SuiteConfig", "SyntheticTask",
    "TaskKeySet", "TrainConfig", "TrainingError", "TruncatedError", "VersionError", "average_performance",
    "backward_transfer", "build_backbone", "count_trainable", "forward", "generate_suite", "load_checkpoint",
    "lora_forward", "match_task", "moe_forward", "mose_forward", "parameter_growth", "parse_config",
    "parse_config_text", "pull_loss", "run", "run_joint", "run_sequence", "save_checkpoint",
]
