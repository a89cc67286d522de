"""Universal adversarial perturbations at desk scale.

Generate nontargeted and targeted universal perturbations against a small
differentiable image classifier, measure fooling and targeted success rates
with confusion structure, and harden models by iterative adversarial
retraining. Everything is seed-reproducible down to the output bytes.
"""

from .attacks import (AttackBudget, AttackParams, Perturbation, fgsm_step,
                      generate_uap, lp_norm, project, random_uap)
from .datasets import Dataset, concat
from .defense import RetrainConfig, RetrainRecord, adversarial_retrain
from .evaluation import (EvalReport, accuracy, confusion_matrix,
                         dataset_norm_stats, evaluate, fooling_rate,
                         resolve_budget, targeted_success_rate)
from .network import (LayerSpec, Network, conv2d, dense, flatten,
                      inverse_frequency_weights, maxpool2d, relu, softmax)
from .serialize import (FileFormatError, load_model, load_perturbation,
                        save_model, save_perturbation)

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "AttackParams", "Dataset", "EvalReport", "FileFormatError",
    "LayerSpec", "Network", "Perturbation", "RetrainConfig", "RetrainRecord",
    "accuracy", "adversarial_retrain", "concat", "confusion_matrix", "conv2d",
    "dataset_norm_stats", "dense", "evaluate", "fgsm_step", "flatten",
    "fooling_rate", "generate_uap", "inverse_frequency_weights", "load_model",
    "load_perturbation", "lp_norm", "maxpool2d", "project", "random_uap",
    "relu", "resolve_budget", "save_model", "save_perturbation", "softmax",
    "targeted_success_rate",
]
