"""Boundary-preserving class unlearning for hyperspherical prototype OOD detectors."""
from .bank import PrototypeBank, load_bank, save_bank
from .data import (
    EmbeddingDataset,
    ForgetPlan,
    apply_forget_plan,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .detection import EvalReport, ScoreFunction, auroc, evaluate, fit_mahalanobis, fpr_at_95_tpr
from .geometry import VmfParams, class_logit, normalize, sample_vmf, total_free_energy
from .losses import LossWeights, orthogonality_loss, protect_loss, push_loss, total_objective
from .model import AdapterStack, LowRankAdapter, Projector, forward, load_model, merge_task, save_model
from .training import (
    PretrainConfig,
    TrainLog,
    UnlearnConfig,
    baseline_grad_ascent,
    baseline_random_label,
    baseline_retrain,
    pretrain,
    unlearn_continual,
    unlearn_tfer,
)

__version__ = "0.1.0"
