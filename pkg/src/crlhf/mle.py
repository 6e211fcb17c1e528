"""Regularized Bradley-Terry maximum likelihood for linear rewards.

Each oracle is fit independently on feature differences
``delta_i = phi(x_i, a1_i) - phi(x_i, a2_i)`` by maximizing

    sum_i [y_i log s(<theta, delta_i>) + (1 - y_i) log s(-<theta, delta_i>)]
        - (N * lambda_reg / 2) ||theta||^2

with a damped Newton iteration. The ridge term makes the Hessian of the
penalized objective equal to -(sum_i s'(z_i) delta_i delta_i^T + N lambda_reg I),
so its curvature lines up with the regularized covariance used by the
confidence radius.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import FeatureTable, PreferenceDataset
from .exceptions import DomainError, ValidationError


def log_likelihood(theta, deltas, labels) -> float:
    """Bradley-Terry log-likelihood; stable for |<theta, delta>| up to ~700 and beyond."""
    z = np.asarray(deltas, dtype=float) @ np.asarray(theta, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.sum(y * log_expit(z) + (1.0 - y) * log_expit(-z)))


def log_likelihood_grad(theta, deltas, labels) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=float)
    z = deltas @ np.asarray(theta, dtype=float)
    return deltas.T @ (np.asarray(labels, dtype=float) - expit(z))


def log_likelihood_hess(theta, deltas) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=float)
    z = deltas @ np.asarray(theta, dtype=float)
    w = expit(z) * expit(-z)
    return -(deltas.T * w) @ deltas


def logistic_curvature(bound_B: float) -> float:
    """gamma = 1 / (2 + e^{-B} + e^{B}), the minimum of s' on [-B, B] (up to the factor 2B)."""
    return 1.0 / (2.0 + np.exp(-bound_B) + np.exp(bound_B))


def beta_N(delta: float, N: int, d: int, lambda_reg: float, bound_B: float,
           C: float = 1.0, gamma: float = None) -> float:
    """Confidence radius of the MLE in the regularized-covariance norm.

    ``C * sqrt((d + log(1/delta)) / (gamma^2 N) + lambda_reg B^2)``; ``gamma``
    defaults to :func:`logistic_curvature` of ``bound_B``.
    """
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if N < 1:
        raise DomainError("N must be at least 1")
    if not C > 0:
        raise DomainError("C must be positive")
    if gamma is None:
        gamma = logistic_curvature(bound_B)
    return float(C * np.sqrt((d + np.log(1.0 / delta)) / (gamma**2 * N) + lambda_reg * bound_B**2))


@dataclass(frozen=True, eq=False)
class CovarianceBundle:
    sigma_N: np.ndarray
    lambda_reg: float
    sigma_reg: np.ndarray
    min_eig: float
    max_eig: float

    def norm(self, v) -> float:
        """Mahalanobis norm ||v||_{sigma_reg}."""
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(v @ self.sigma_reg @ v))


def covariance_bundle(deltas, lambda_reg: float) -> CovarianceBundle:
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 2 or deltas.shape[0] < 1:
        raise ValidationError("deltas must be a non-empty (N, d) array")
    if not lambda_reg > 0:
        raise DomainError("lambda_reg must be positive")
    norms = np.linalg.norm(deltas, axis=1)
    if norms.max() > 2.0 + 1e-12:
        raise ValidationError(f"feature difference norm {norms.max():.6g} exceeds 2")
    sigma_N = deltas.T @ deltas / deltas.shape[0]
    sigma_N = 0.5 * (sigma_N + sigma_N.T)
    sigma_reg = sigma_N + lambda_reg * np.eye(deltas.shape[1])
    eigs = np.linalg.eigvalsh(sigma_reg)
    return CovarianceBundle(sigma_N, lambda_reg, sigma_reg, float(eigs[0]), float(eigs[-1]))


class BradleyTerryMLE(ClassifierMixin, BaseEstimator):
    """Ridge-penalized Bradley-Terry estimator on feature differences.

    ``X`` holds feature differences, ``y`` is 1 when the first response won.
    Behaves like a logistic regression without intercept.

    Parameters
    ----------
    lambda_reg : float
        Ridge weight.
    penalty : {"per-sample", "total"}
        ``"per-sample"`` gives the penalty N * lambda_reg / 2 * ||theta||^2,
        matching the regularized covariance; ``"total"`` gives
        lambda_reg / 2 * ||theta||^2, whose shrinkage vanishes as N grows.
    tol : float
        Stop when the penalized gradient norm drops to this value.
    max_iter : int
        Newton iteration cap.
    """

    def __init__(self, lambda_reg=0.01, penalty="per-sample", tol=1e-8, max_iter=100):
        self.lambda_reg = lambda_reg
        self.penalty = penalty
        self.tol = tol
        self.max_iter = max_iter

    def _objective(self, theta, X, y, pen):
        return -log_likelihood(theta, X, y) + 0.5 * pen * theta @ theta

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("labels must be 0 or 1")
        if self.lambda_reg < 0:
            raise DomainError("lambda_reg must be nonnegative")
        if self.penalty not in ("per-sample", "total"):
            raise DomainError(f"unknown penalty {self.penalty!r}")
        n, d = X.shape
        pen = n * self.lambda_reg if self.penalty == "per-sample" else self.lambda_reg
        theta = np.zeros(d)
        obj = self._objective(theta, X, y, pen)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            grad = -log_likelihood_grad(theta, X, y) + pen * theta
            if np.linalg.norm(grad) <= self.tol:
                converged = True
                it -= 1
                break
            hess = -log_likelihood_hess(theta, X) + pen * np.eye(d)
            try:
                step = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            t = 1.0
            gnorm = np.linalg.norm(grad)
            while t > 1e-12:
                cand = theta - t * step
                cand_obj = self._objective(cand, X, y, pen)
                if cand_obj <= obj + 1e-4 * t * (grad @ -step) or cand_obj <= obj:
                    break
                # objective differences drown in rounding near the optimum
                cand_grad = -log_likelihood_grad(cand, X, y) + pen * cand
                if np.linalg.norm(cand_grad) < 0.5 * gnorm:
                    break
                t *= 0.5
            theta, obj = cand, cand_obj
        grad = -log_likelihood_grad(theta, X, y) + pen * theta
        self.grad_norm_ = float(np.linalg.norm(grad))
        converged = converged or self.grad_norm_ <= self.tol
        if not converged:
            warnings.warn(
                f"Newton iteration stopped after {self.max_iter} steps with "
                f"gradient norm {self.grad_norm_:.3e}",
                ConvergenceWarning,
            )
        self.coef_ = theta
        self.converged_ = converged
        self.n_iter_ = it
        self.neg_loglik_ = -log_likelihood(theta, X, y)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return X @ self.coef_

    def predict_proba(self, X):
        z = self.decision_function(X)
        p = expit(z)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


@dataclass(frozen=True, eq=False)
class MleFit:
    theta_hat: np.ndarray
    neg_loglik: float
    converged: bool
    grad_norm: float
    n_iter: int
    oracle_index: int
    norm_exceeds_bound: bool = False


def fit_mle(dataset: PreferenceDataset, table: FeatureTable, oracle_index: int,
            lambda_reg: float = 0.01, bound_B: float = None,
            tol: float = 1e-8, max_iter: int = 100, penalty: str = "per-sample") -> MleFit:
    """Fit one oracle's reward parameter from the dataset.

    The norm cap ``bound_B`` is not imposed during optimization; if the
    estimate exceeds it a warning is issued and ``norm_exceeds_bound`` is set.
    """
    if not lambda_reg > 0:
        raise DomainError("lambda_reg must be positive")
    if not 0 <= oracle_index < dataset.num_oracles:
        raise DomainError(f"oracle_index {oracle_index} out of range")
    deltas = dataset.deltas(table)
    est = BradleyTerryMLE(lambda_reg=lambda_reg, penalty=penalty, tol=tol, max_iter=max_iter)
    est.fit(deltas, dataset.labels[:, oracle_index])
    exceeds = False
    if bound_B is not None and np.linalg.norm(est.coef_) > bound_B:
        exceeds = True
        warnings.warn(
            f"oracle {oracle_index}: ||theta_hat|| = {np.linalg.norm(est.coef_):.4g} "
            f"exceeds B = {bound_B:.4g}"
        )
    return MleFit(est.coef_, est.neg_loglik_, est.converged_, est.grad_norm_,
                  est.n_iter_, oracle_index, exceeds)


def fit_all(dataset: PreferenceDataset, table: FeatureTable, lambda_reg: float = 0.01,
            **kwargs) -> list:
    """Independent fits for every oracle, in label-column order."""
    return [fit_mle(dataset, table, k, lambda_reg, **kwargs) for k in range(dataset.num_oracles)]
