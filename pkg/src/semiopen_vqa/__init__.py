"""Semi-open visual question answering on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import Parameter, ShapeError, Tensor
from .model import ModelConfig, VqaModel
from .data import AnswerVocabulary, generate_dataset, load_dataset, save_dataset
from .train import EvalReport, TrainState, evaluate, train
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "AnswerVocabulary", "CheckpointError", "EvalReport", "ModelConfig", "Parameter", "ShapeError", "Tensor",
    "TrainState", "VqaModel", "__version__", "evaluate", "generate_dataset", "load_checkpoint", "load_dataset",
    "save_checkpoint", "save_dataset", "train",
]
