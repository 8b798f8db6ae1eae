"""Desk-scale training, evaluation and ablation."""

from .ablation import AblationReport, ablation_sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .model import Network
from .optim import AdamW, cosine_lr
from .tasks import Task, make_task, unigram_perplexity
from .train import OptimizerConfig, RunRecord, TrainConfig, evaluate, load_network, train

__all__ = [
    "AblationReport", "ablation_sweep",
    "load_checkpoint", "save_checkpoint", "Network", "AdamW",
    "cosine_lr", "Task", "make_task", "unigram_perplexity", "OptimizerConfig", "RunRecord",
    "TrainConfig", "evaluate", "load_network", "train",
]
