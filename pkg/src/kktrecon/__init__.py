"""Train homogeneous ReLU classifiers and reconstruct their training data from the weights."""

from .data import Dataset, SyntheticSpec, load_cifar10, load_cifar100, make_synthetic
from .estimators import HomogeneousMLPClassifier, KKTReconstructor
from .evaluator import MatchReport, match, ranked_pairs, scatter_data, ssim
from .experiments import ExperimentSpec, read_spec, run_experiment, run_grid
from .mlp import InitScheme, MarginJacobian, MlpParams, forward, grad_theta_margin, grad_x_margin, init_params, margin, mixed_vjp
from .plotting import emit_plot
from .reconstructor import ReconConfig, ReconState, hyperparam_search, reconstruct, recon_grads, recon_loss
from .trainer import TrainConfig, TrainReport, fit_dual_coefficients, kkt_audit, train

__all__ = [
    "Dataset", "SyntheticSpec", "load_cifar10", "load_cifar100", "make_synthetic",
    "HomogeneousMLPClassifier", "KKTReconstructor",
    "MatchReport", "match", "ranked_pairs", "scatter_data", "ssim",
    "ExperimentSpec", "read_spec", "run_experiment", "run_grid",
    "InitScheme", "MarginJacobian", "MlpParams", "forward", "grad_theta_margin", "grad_x_margin",
    "init_params", "margin", "mixed_vjp",
    "emit_plot",
    "ReconConfig", "ReconState", "hyperparam_search", "reconstruct", "recon_grads", "recon_loss",
    "TrainConfig", "TrainReport", "fit_dual_coefficients", "kkt_audit", "train",
]

__version__ = "0.1.0"
