"""Few-shot drug-pair synergy classification pipeline."""

__version__ = "0.1.0"

from .baselines import GradientBoostedTreesClassifier, TabularAttentionClassifier  # noqa: E402
from .lm import TransformerSequenceClassifier  # noqa: E402
from .metrics import auprc, auroc  # noqa: E402

__all__ = [
    "GradientBoostedTreesClassifier",
    "TabularAttentionClassifier",
    "TransformerSequenceClassifier",
    "auprc",
    "auroc",
    "__version__",
]
