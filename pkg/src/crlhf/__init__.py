"""Constrained preference alignment over finite prompt and action sets.

Bradley-Terry reward estimation, closed-form regularized policies, a
projected-gradient dual solver and finite-sample certificates.
"""

from .certificates import CertificateReport, certify
from .core import (KL, Divergence, FeatureTable, Policy, PreferenceDataset, ProblemSpec,
                   RewardModel)
from .dual import DualFunction, eval_dual, lipschitz_constant, strong_convexity_modulus
from .exceptions import (CrlhfError, DomainError, InfeasibleError, NumericalError, ShapeError,
                         SupportError, ValidationError)
from .mle import BradleyTerryMLE, beta_N, fit_all, fit_mle
from .policy import f_divergence_policy, gibbs_policy
from .solver import ConstrainedPolicyOptimizer, SolverConfig, evaluate_solution, solve_dual

__version__ = "0.1.0"

__all__ = [
    "BradleyTerryMLE", "CertificateReport", "ConstrainedPolicyOptimizer", "CrlhfError",
    "Divergence", "DomainError", "DualFunction", "FeatureTable", "InfeasibleError", "KL",
    "NumericalError", "Policy", "PreferenceDataset", "ProblemSpec", "RewardModel", "ShapeError",
    "SolverConfig", "SupportError", "ValidationError", "beta_N", "certify", "eval_dual",
    "evaluate_solution", "f_divergence_policy", "fit_all", "fit_mle", "gibbs_policy",
    "lipschitz_constant", "solve_dual", "strong_convexity_modulus",
]
