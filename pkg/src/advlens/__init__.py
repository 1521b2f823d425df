"""Desk-scale adversarial robustness lab on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, fgsm, frequency_filtered_attack, pgd  # noqa: E402
from .models import Classifier, ConfigError, ModelConfig  # noqa: E402
from .data import DataError, Dataset, load_dataset  # noqa: E402

__all__ = ["AttackConfig", "AttackResult", "Classifier", "ConfigError", "DataError", "Dataset",
           "ModelConfig", "fgsm", "frequency_filtered_attack", "load_dataset", "pgd",
           "__version__"]
