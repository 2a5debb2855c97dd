"""Domain-specific mixed batch/instance normalization in plain numpy."""

from .model import DomainBranchNet, ensemble_predict, leave_one_out_predict
from .norm import NormConfig, compute_stats, mix_stats
from .optim import LrSchedule, lr_at, train
from .synthdata import default_four_domain_preset, generate

__version__ = "0.1.0"

__all__ = [
    "DomainBranchNet", "LrSchedule", "NormConfig", "compute_stats", "default_four_domain_preset",
    "ensemble_predict", "generate", "leave_one_out_predict", "lr_at", "mix_stats", "train",
]
