"""Zero-shot anomaly detection with a visually-guided sparse mixture of prompts."""
from .config import RunConfig, load_config, micro_config, full_scale_config
from .data import generate_synthetic_dataset, load_dataset, stack_samples
from .errors import NumericError, UserError, ZsadError
from .estimator import PromptMoEDetector
from .metrics import auroc, average_precision, evaluate, pixel_auroc, pro_score
from .model import ModelConfig, PromptMoEModel
from .trainer import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "PromptMoEDetector",
    "PromptMoEModel",
    "ModelConfig",
    "RunConfig",
    "load_config",
    "micro_config",
    "full_scale_config",
    "generate_synthetic_dataset",
    "load_dataset",
    "stack_samples",
    "auroc",
    "average_precision",
    "pixel_auroc",
    "pro_score",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "ZsadError",
    "UserError",
    "NumericError",
]
