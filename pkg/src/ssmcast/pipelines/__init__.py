from ssmcast.pipelines.checkpoint import (
    FORMAT_VERSION,
    CheckpointEnvelope,
    CheckpointError,
    UnsupportedVersionError,
    load_checkpoint,
    save_checkpoint,
)
from ssmcast.pipelines.evaluate import EvalConfig, MetricsReport, cross_validate, evaluate_mae, sem
from ssmcast.pipelines.optim import Adam
from ssmcast.pipelines.train import STRATEGIES, TrainConfig, TrainingDivergedError, TrainResult, train

__all__ = [
    "FORMAT_VERSION", "STRATEGIES", "Adam", "CheckpointEnvelope", "CheckpointError", "EvalConfig",
    "MetricsReport", "TrainConfig", "TrainResult", "TrainingDivergedError", "UnsupportedVersionError",
    "cross_validate", "evaluate_mae", "load_checkpoint", "save_checkpoint", "sem", "train",
]
