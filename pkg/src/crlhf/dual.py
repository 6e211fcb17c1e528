"""The Lagrange dual of the constrained regularized policy problem.

    g(lam) = max_pi E_pi[r_1 + sum_k lam_k r_k] - eta D(pi || pi0) - sum_k lam_k J_k

All expectations are exact sums over the finite prompt/action space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import FeatureTable, Policy, ProblemSpec, stack_thetas
from .exceptions import DomainError, ShapeError
from .policy import f_divergence_probs, gibbs_probs


@dataclass(frozen=True, eq=False)
class DualEval:
    lam: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray  # (1/eta) E_x Cov(r_k, r_l); None for non-KL divergences
    policy: Policy

    @property
    def second_derivative(self) -> float:
        """g'' for a single constraint (variance formula)."""
        return float(self.hessian[0, 0])


class DualFunction:
    """Dual objective for fixed reward parameters, with rewards precomputed.

    Parameters
    ----------
    spec : ProblemSpec
    pi0 : Policy
        Reference policy with full support.
    table : FeatureTable
    theta1 : array (d,)
        Target-oracle parameter.
    theta_constraints : array (m, d) or (d,)
        One parameter per constrained oracle, aligned with ``spec.j_min``.
    """

    def __init__(self, spec: ProblemSpec, pi0: Policy, table: FeatureTable, theta1, theta_constraints):
        pi0.check_full_support()
        if pi0.shape != (table.num_prompts, table.num_actions):
            raise ShapeError("reference policy does not match the feature table")
        thetas = stack_thetas(theta_constraints)
        if thetas.shape[0] != spec.num_constraints:
            raise ShapeError(
                f"{thetas.shape[0]} constraint parameters for {spec.num_constraints} thresholds"
            )
        self.spec = spec
        self.pi0 = pi0
        self.table = table
        self.eta = spec.eta
        self.r1 = table.rewards(theta1)
        self.rc = np.stack([table.rewards(t) for t in thetas])  # (m, X, A)
        self.j_min = spec.j_min
        self.d0 = table.prompt_dist
        self._log_pi0 = np.log(pi0.probs)

    @property
    def num_constraints(self) -> int:
        return self.rc.shape[0]

    def _check(self, lam) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.shape != (self.num_constraints,):
            raise ShapeError(f"lambda has shape {lam.shape}, expected ({self.num_constraints},)")
        if np.any(lam < 0):
            raise DomainError(f"lambda must be nonnegative, got {lam}")
        return lam

    def combined_rewards(self, lam) -> np.ndarray:
        lam = self._check(lam)
        return self.r1 + np.tensordot(lam, self.rc, axes=1)

    def probs(self, lam) -> np.ndarray:
        r = self.combined_rewards(lam)
        if self.spec.divergence.name == "kl":
            return gibbs_probs(self.pi0.probs, r, self.eta)
        return f_divergence_probs(self.pi0.probs, r, self.eta, self.spec.divergence)

    def policy(self, lam) -> Policy:
        return Policy(self.probs(lam))

    def value(self, lam) -> float:
        lam = self._check(lam)
        r = self.combined_rewards(lam)
        if self.spec.divergence.name == "kl":
            z = self._log_pi0 + r / self.eta
            zmax = z.max(axis=1)
            log_z = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
            return float(self.eta * (self.d0 @ log_z) - lam @ self.j_min)
        p = f_divergence_probs(self.pi0.probs, r, self.eta, self.spec.divergence)
        q = self.pi0.probs
        div = (q * self.spec.divergence.f(p / q)).sum(axis=1)
        return float(self.d0 @ ((p * r).sum(axis=1) - self.eta * div) - lam @ self.j_min)

    def constraint_means(self, probs) -> np.ndarray:
        """E_pi[r_k] for each constrained oracle."""
        return np.einsum("x,xa,kxa->k", self.d0, probs, self.rc)

    def gradient(self, lam) -> np.ndarray:
        return self.constraint_means(self.probs(lam)) - self.j_min

    def hessian(self, lam) -> np.ndarray:
        """(1/eta) E_x Cov_{a ~ pi_lam(.|x)}(r_k, r_l); KL only."""
        p = self.probs(lam)
        return self._hessian_from_probs(p)

    def _hessian_from_probs(self, p) -> np.ndarray:
        mean = np.einsum("xa,kxa->kx", p, self.rc)
        centered = self.rc - mean[:, :, None]
        cov = np.einsum("x,xa,kxa,lxa->kl", self.d0, p, centered, centered)
        return cov / self.eta

    def evaluate(self, lam) -> DualEval:
        lam = self._check(lam)
        p = self.probs(lam)
        grad = self.constraint_means(p) - self.j_min
        hess = self._hessian_from_probs(p) if self.spec.divergence.name == "kl" else None
        return DualEval(lam.copy(), self.value(lam), grad, hess, Policy(p))


def eval_dual(spec: ProblemSpec, pi0: Policy, table: FeatureTable, theta1,
              theta_constraints, lam) -> DualEval:
    """Dual value, gradient, variance-form Hessian and maximizing policy at ``lam``."""
    return DualFunction(spec, pi0, table, theta1, theta_constraints).evaluate(lam)


def lipschitz_constant(bound_B: float, eta: float) -> float:
    """Lipschitz constant B^2 / eta of the dual derivative."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    return bound_B**2 / eta


def strong_convexity_modulus(spec: ProblemSpec, pi0: Policy, table: FeatureTable,
                             theta1, theta_constraints, Lambda: float,
                             grid_size: int = 64) -> float:
    """Grid approximation of the dual's strong-convexity modulus on [0, Lambda]^m.

    Evaluates the smallest eigenvalue of the variance-form Hessian on a
    uniform grid with ``grid_size`` points per axis and returns the minimum.
    This approximates an infimum and can overestimate it between grid points.
    """
    if grid_size < 2:
        raise DomainError("grid_size must be at least 2")
    if not Lambda > 0:
        raise DomainError("Lambda must be positive")
    dual = DualFunction(spec, pi0, table, theta1, theta_constraints)
    if spec.divergence.name != "kl":
        raise DomainError("the variance formula only applies to KL regularization")
    axis = np.linspace(0.0, Lambda, grid_size)
    best = np.inf
    for point in itertools.product(axis, repeat=dual.num_constraints):
        h = dual.hessian(np.array(point))
        best = min(best, float(np.linalg.eigvalsh(h)[0]))
    return max(best, 0.0)
