"""High-probability certificates for the estimated dual program.

Covers the confidence radius of the reward estimates, the change of norm
between the regularized sample covariance and its population counterpart,
value/derivative error envelopes of the estimated dual, a data-driven Slater
slack, bounds on the optimal multiplier, and the final suboptimality and
violation bounds of the projected-gradient solver.

Absolute constants that the theory leaves unspecified (``C`` in the
confidence radius and ``C K^2`` in the covariance concentration) default to
one and are recorded with every report.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Union

import numpy as np

from .core import FeatureTable, Policy, PreferenceDataset, ProblemSpec, f_divergence, stack_thetas
from .dual import DualFunction, lipschitz_constant, strong_convexity_modulus
from .exceptions import DomainError, InfeasibleError
from .mle import beta_N as _beta_N, covariance_bundle

DATA_DEPENDENT = "data-dependent"
DATA_INDEPENDENT = "data-independent"
NET_DIVISIONS = 256


class NormFactors(NamedTuple):
    zeta_min: float
    zeta_max: float
    degenerate: bool
    eps_upper: float
    eps_lower: float


def concentration_error(N: int, d: int, delta: float, C: float = 1.0, K: float = 1.0) -> float:
    """Relative operator-norm deviation of the sample difference covariance."""
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if N < 1:
        raise DomainError("N must be at least 1")
    s = (d + np.log(2.0 / delta)) / N
    return float(C * K**2 * (np.sqrt(s) + s))


def change_of_norm_factors(sigma_infty_eigs, lambda_reg: float, N: int, delta: float,
                           C: float = 1.0, K: float = 1.0) -> NormFactors:
    """Population-level replacements for the extreme eigenvalues of the regularized covariance.

    ``sigma_infty_eigs`` are all ``d`` eigenvalues of the population
    difference covariance. When the lower deviation reaches one the factor
    ``1 - eps_lower`` is clamped at zero and ``degenerate`` is set.
    """
    eigs = np.sort(np.asarray(sigma_infty_eigs, dtype=float))
    d = eigs.shape[0]
    lo, hi = max(float(eigs[0]), 0.0), float(eigs[-1])
    eps_up = concentration_error(N, d, delta, C, K)
    eps_low = hi / lo * eps_up if lo > 0 else np.inf
    degenerate = eps_low >= 1.0
    zeta_max = np.sqrt((1.0 + eps_up) * hi + lambda_reg)
    zeta_min = np.sqrt(max(1.0 - eps_low, 0.0) * lo + lambda_reg)
    return NormFactors(float(zeta_min), float(zeta_max), bool(degenerate), eps_up, float(eps_low))


def population_difference_covariance(table: FeatureTable, pi0: Policy) -> np.ndarray:
    """E over (x, a, a') ~ d0 x pi0 x pi0 of Delta Delta^T, computed exactly.

    Equals twice the prompt-averaged covariance of phi(x, .) under pi0.
    """
    phi = table.features
    p = pi0.probs
    mean = np.einsum("xa,xad->xd", p, phi)
    second = np.einsum("x,xa,xad,xae->de", table.prompt_dist, p, phi, phi)
    outer = np.einsum("x,xd,xe->de", table.prompt_dist, mean, mean)
    cov = 2.0 * (second - outer)
    return 0.5 * (cov + cov.T)


def _denominator(mode: str, min_eig_or_zeta: float) -> float:
    if mode == DATA_DEPENDENT:
        value = np.sqrt(min_eig_or_zeta)
    elif mode == DATA_INDEPENDENT:
        value = float(min_eig_or_zeta)
    else:
        raise DomainError(f"unknown envelope mode {mode!r}")
    if not value > 0:
        raise DomainError("envelope denominator must be positive")
    return value


def dual_envelopes(lam, beta_N: float, mode: str, min_eig_or_zeta: float,
                   bound_B: float, eta: float):
    """Pointwise error envelopes of the estimated dual value and derivative.

    ``lam`` may be an array; for several constraints pass the l1 norm of the
    multiplier vector. In ``data-dependent`` mode ``min_eig_or_zeta`` is the
    smallest eigenvalue of the regularized sample covariance, in
    ``data-independent`` mode it is ``zeta_min``.
    """
    denom = _denominator(mode, min_eig_or_zeta)
    lam = np.asarray(lam, dtype=float)
    e_g = (1.0 + lam) * beta_N / denom
    e_gp = (1.0 + bound_B * (1.0 + lam) / eta) * beta_N / denom
    if e_g.ndim == 0:
        return float(e_g), float(e_gp)
    return e_g, e_gp


def uniform_envelopes(Lambda: float, beta_N: float, mode: str, min_eig_or_zeta: float,
                      bound_B: float, eta: float, spacing: float = None):
    """Envelopes valid uniformly over [0, Lambda] via a grid net.

    The envelopes are increasing in lambda, so the net value is the pointwise
    envelope at ``Lambda`` plus the slack ``L * spacing`` with ``L = B^2/eta``.
    Returns ``(E_g, E_gprime, spacing)``.
    """
    if spacing is None:
        spacing = Lambda / NET_DIVISIONS
    e_g, e_gp = dual_envelopes(Lambda, beta_N, mode, min_eig_or_zeta, bound_B, eta)
    slack = lipschitz_constant(bound_B, eta) * spacing
    return e_g + slack, e_gp + slack, spacing


class SlaterSlack(NamedTuple):
    rho_hat: float
    greedy_policy: Policy
    certified: bool
    greedy_reward: float


def greedy_policy(rewards: np.ndarray) -> Policy:
    """Deterministic per-prompt argmax policy; ties go to the lowest action index."""
    probs = np.zeros_like(rewards, dtype=float)
    probs[np.arange(rewards.shape[0]), np.argmax(rewards, axis=1)] = 1.0
    return Policy(probs)


def slater_slack(theta2_hat, table: FeatureTable, j_min: float, beta_N: float,
                 min_eig: float) -> SlaterSlack:
    """Half the certified margin of the greedy policy for the estimated constraint reward."""
    rewards = table.rewards(theta2_hat)
    pi = greedy_policy(rewards)
    greedy_reward = float(table.prompt_dist @ rewards.max(axis=1))
    rho = 0.5 * (greedy_reward - beta_N / np.sqrt(min_eig) - float(j_min))
    return SlaterSlack(float(rho), pi, bool(rho > 0), greedy_reward)


class LambdaBound(NamedTuple):
    Lambda: float
    bound: float
    active: str  # "radius" or "curvature"


def lambda_star_bound(mode: str, *, bound_B: float, J_tilde: float, rho: float,
                      gprime0: float, modulus: Union[float, Callable[[float], float]],
                      beta_N: float = 0.0, min_eig: float = None,
                      envelope_gprime0: float = 0.0) -> LambdaBound:
    """Upper bounds on the optimal multiplier.

    ``mode="deterministic"`` uses the true slack ``rho``, the true objective
    ``J_tilde`` of the Slater policy, and the true ``g'(0)``.
    ``mode="data-driven"`` uses the estimated slack, estimated objective and
    ``g_hat'(0)`` widened by ``envelope_gprime0``, and inflates the radius by
    ``beta_N / sqrt(min_eig)``.

    ``modulus`` is the strong-convexity modulus on [0, Lambda], or a callable
    computing it from ``Lambda``.
    """
    if not rho > 0:
        raise InfeasibleError(f"Slater slack {rho:.6g} is not positive; cannot bound lambda*")
    if mode == "deterministic":
        Lambda = (bound_B - J_tilde) / rho
        numer = max(-gprime0, 0.0)
    elif mode == "data-driven":
        if min_eig is None:
            raise DomainError("data-driven bound needs min_eig")
        Lambda = (bound_B + beta_N / np.sqrt(min_eig) - J_tilde) / rho
        numer = max(-gprime0 + envelope_gprime0, 0.0)
    else:
        raise DomainError(f"unknown mode {mode!r}")
    Lambda = max(float(Lambda), 0.0)
    if callable(modulus):
        m = modulus(Lambda) if Lambda > 0 else 0.0
    else:
        m = modulus
    if numer == 0.0:
        curvature = 0.0
    elif m > 0:
        curvature = numer / m
    else:
        curvature = np.inf
    if curvature < Lambda:
        return LambdaBound(Lambda, float(curvature), "curvature")
    return LambdaBound(Lambda, Lambda, "radius")


class Theorem2Bounds(NamedTuple):
    dual_gap: float
    violation: float
    primal_gap: float


def theorem2_bounds(E_g_R: float, E_gprime_R: float, bound_B: float, eta: float,
                    R: float, T: int) -> Theorem2Bounds:
    """Dual gap, constraint violation and primal gap bounds after T averaged PGD steps."""
    if T < 1:
        raise DomainError("T must be at least 1")
    if not R > 0:
        raise DomainError("R must be positive")
    opt = bound_B**2 * R**2 / (2.0 * eta * T)
    dual_gap = 2.0 * E_g_R + opt
    violation = E_gprime_R + bound_B**2 * R / (eta * np.sqrt(T))
    primal_gap = dual_gap + R * E_gprime_R + bound_B**2 * R**2 / (eta * np.sqrt(T))
    return Theorem2Bounds(float(dual_gap), float(violation), float(primal_gap))


@dataclass
class CertificateReport:
    """Every certificate quantity together with the constants it was computed at."""

    mode: str
    delta: float
    failure_probability: float
    theorem1_failure_probability: float
    C: float
    CK2: float
    N: int
    d: int
    lambda_reg: float
    bound_B: float
    eta: float
    beta_N: float
    min_eig: float
    max_eig: float
    zeta_min: float
    zeta_max: float
    zeta_degenerate: bool
    slack_rho_hat: float  # nan when the Slater slack is not certified
    slater_certified: bool
    greedy_reward: float
    J_hat_greedy: float
    ghat_prime0: float
    modulus_hat: float
    modulus_true: float  # nan without ground truth
    Lambda: float
    lambda_star_bound: float
    lambda_bound_active: str
    R: float
    T: int
    net_spacing: float
    envelope_g_R: float
    envelope_gprime_R: float
    envelope_gprime_0: float
    thm2_dual_gap: float
    thm2_violation: float
    thm2_primal_gap: float
    _denominator: float = field(default=np.nan, repr=False)

    # _denominator is already sqrt(min_eig) or zeta_min, so it is passed
    # through the branch that uses it verbatim

    def envelope_g(self, lam):
        return dual_envelopes(lam, self.beta_N, DATA_INDEPENDENT, self._denominator,
                              self.bound_B, self.eta)[0]

    def envelope_gprime(self, lam):
        return dual_envelopes(lam, self.beta_N, DATA_INDEPENDENT, self._denominator,
                              self.bound_B, self.eta)[1]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if not k.startswith("_")}


def default_bound(table: FeatureTable, thetas) -> float:
    """Largest absolute estimated reward over all oracles and (prompt, action) pairs."""
    thetas = stack_thetas(thetas)
    return float(max(np.abs(table.rewards(t)).max() for t in thetas))


def certify(table: FeatureTable, pi0: Policy, dataset: PreferenceDataset, theta_hats,
            spec: ProblemSpec, *, delta: float = 0.05, C: float = 1.0, CK2: float = 1.0,
            lambda_reg: float = 0.01, bound_B: float = None, T: int = 1000,
            R: float = None, mode: str = DATA_DEPENDENT, true_thetas=None,
            sigma_infty_eigs=None, grid_size: int = 64,
            fallback_R: float = None) -> CertificateReport:
    """Compute the full certificate report for one estimated problem.

    ``theta_hats`` lists the target parameter first, then one per constraint.
    The Slater and multiplier-radius certificates are defined for a single
    constraint; with several constraints ``R`` must be given and the envelopes
    use the l1 radius ``m * R``.

    When ``R`` is omitted it is set to the certified radius ``Lambda``; if the
    slack cannot be certified, ``fallback_R`` is used or
    :class:`InfeasibleError` is raised.
    """
    thetas = stack_thetas(theta_hats)
    m = spec.num_constraints
    if thetas.shape[0] != m + 1:
        raise DomainError(f"expected {m + 1} parameters, got {thetas.shape[0]}")
    N = len(dataset)
    d = table.dim
    if bound_B is None:
        bound_B = default_bound(table, thetas)
    cov = covariance_bundle(dataset.deltas(table), lambda_reg)
    beta = _beta_N(delta, N, d, lambda_reg, bound_B, C)

    if sigma_infty_eigs is None:
        if mode == DATA_INDEPENDENT:
            sigma_infty_eigs = np.linalg.eigvalsh(population_difference_covariance(table, pi0))
        else:
            sigma_infty_eigs = np.linalg.eigvalsh(cov.sigma_N)
    factors = change_of_norm_factors(sigma_infty_eigs, lambda_reg, N, delta, CK2, 1.0)
    if mode == DATA_INDEPENDENT:
        denom = factors.zeta_min
    elif mode == DATA_DEPENDENT:
        denom = float(np.sqrt(cov.min_eig))
    else:
        raise DomainError(f"unknown certificate mode {mode!r}")

    dual_hat = DualFunction(spec, pi0, table, thetas[0], thetas[1:])
    ghat0 = dual_hat.gradient(np.zeros(m))
    e_gp0 = dual_envelopes(0.0, beta, DATA_INDEPENDENT, denom, bound_B, spec.eta)[1]

    rho_hat = np.nan
    certified = False
    greedy_reward = np.nan
    J_hat = np.nan
    Lambda = np.nan
    lam_bound = np.nan
    active = "unavailable"
    modulus_hat = np.nan
    modulus_true = np.nan
    if m == 1:
        slack = slater_slack(thetas[1], table, spec.j_min[0], beta, cov.min_eig)
        greedy_reward = slack.greedy_reward
        J_hat = (float(table.prompt_dist @ (slack.greedy_policy.probs * table.rewards(thetas[0])).sum(axis=1))
                 - spec.eta * f_divergence(slack.greedy_policy, pi0, table.prompt_dist, spec.divergence))
        if slack.certified:
            rho_hat = slack.rho_hat
            certified = True
            Lambda = (bound_B + beta / np.sqrt(cov.min_eig) - J_hat) / rho_hat
            Lambda = max(float(Lambda), 0.0)
            if spec.divergence.name == "kl" and Lambda > 0:
                modulus_hat = strong_convexity_modulus(spec, pi0, table, thetas[0], thetas[1:],
                                                       Lambda, grid_size)
                if true_thetas is not None:
                    tt = stack_thetas(true_thetas)
                    modulus_true = strong_convexity_modulus(spec, pi0, table, tt[0], tt[1:],
                                                            Lambda, grid_size)
            modulus = modulus_true if np.isfinite(modulus_true) else modulus_hat
            lb = lambda_star_bound("data-driven", bound_B=bound_B, J_tilde=J_hat, rho=rho_hat,
                                   gprime0=float(ghat0[0]),
                                   modulus=modulus if np.isfinite(modulus) else 0.0,
                                   beta_N=beta, min_eig=cov.min_eig, envelope_gprime0=e_gp0)
            Lambda, lam_bound, active = lb

    if R is None:
        if certified and Lambda > 0:
            R = Lambda
        elif fallback_R is not None:
            R = float(fallback_R)
            if not certified:
                warnings.warn("Slater slack not certified; using the fallback projection radius")
        else:
            raise InfeasibleError("Slater slack not certified and no projection radius given")
    reach = m * R
    e_g_R, e_gp_R, spacing = uniform_envelopes(reach, beta, DATA_INDEPENDENT, denom, bound_B, spec.eta)
    bounds = theorem2_bounds(e_g_R, e_gp_R, bound_B, spec.eta, reach, T)
    # union bounds: one MLE event per oracle, plus covariance concentration
    # for population-level envelopes, plus the Slater estimate for lambda*
    failure = (m + 1) * delta + (delta if mode == DATA_INDEPENDENT else 0.0)
    failure_thm1 = (m + 1) * delta + delta

    return CertificateReport(
        mode=mode, delta=delta, failure_probability=failure,
        theorem1_failure_probability=failure_thm1, C=C, CK2=CK2, N=N, d=d,
        lambda_reg=lambda_reg, bound_B=bound_B, eta=spec.eta, beta_N=beta,
        min_eig=cov.min_eig, max_eig=cov.max_eig, zeta_min=factors.zeta_min,
        zeta_max=factors.zeta_max, zeta_degenerate=factors.degenerate,
        slack_rho_hat=rho_hat, slater_certified=certified, greedy_reward=greedy_reward,
        J_hat_greedy=J_hat, ghat_prime0=float(ghat0[0]) if m == 1 else float(np.min(ghat0)),
        modulus_hat=modulus_hat, modulus_true=modulus_true, Lambda=Lambda,
        lambda_star_bound=lam_bound, lambda_bound_active=active, R=float(R), T=int(T),
        net_spacing=spacing, envelope_g_R=e_g_R, envelope_gprime_R=e_gp_R,
        envelope_gprime_0=e_gp0, thm2_dual_gap=bounds.dual_gap,
        thm2_violation=bounds.violation, thm2_primal_gap=bounds.primal_gap,
        _denominator=denom,
    )
