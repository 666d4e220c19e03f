"""Flow-enhanced neural process for cold-start cross-domain rating prediction."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import NFNPCDR, ModelConfig, TaskBatch
from .synthdata import SynthConfig
from .training import EvalReport, LossBreakdown, TrainConfig, evaluate, estimate_entropy, fit, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint", "NFNPCDR", "ModelConfig",
    "TaskBatch", "SynthConfig", "EvalReport", "LossBreakdown", "TrainConfig", "evaluate",
    "estimate_entropy", "fit", "train",
]
