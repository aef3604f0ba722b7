"""Differentially private forward propagation: accounting, mechanism and training."""

from .accountant import (
    AccountingError,
    BudgetExhausted,
    BudgetLedger,
    BudgetTooSmall,
    BudgetUnachievable,
    CalibrationResult,
    CompositionSchedule,
    PrivacyBudget,
    calibrate_sigma_dpfp,
    calibrate_sigma_dpsgd,
    compose_mu_dpfp,
    compose_mu_dpsgd,
    delta_from_mu,
    epsilon_from_mu,
    mu_from_budget,
    standard_normal_cdf,
)
from .mechanism import NoiseSpec, clip_l2, privatize, sample_gaussian
from .trainer import TrainConfig, TrainRunMetrics, evaluate, train, train_dpfp, train_dpsgd, train_nonprivate

__version__ = "0.1.0"
