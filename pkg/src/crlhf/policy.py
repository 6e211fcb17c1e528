"""Closed-form maximizers of the divergence-regularized Lagrangian.

For KL regularization the maximizer is the Gibbs tilt of the reference
policy. For other f-divergences the maximizer is
``pi0 * [(f')^{-1}((r - tau_x) / eta)]_+`` where the per-prompt threshold
``tau_x`` is found by bisection on the normalization constraint.
"""

from __future__ import annotations

import numpy as np

from .core import KL, Divergence, FeatureTable, Policy, ThetaLike, _as_theta
from .exceptions import DomainError, NumericalError, ShapeError

MAX_BISECT = 200
SIMPLEX_TOL = 1e-10


def gibbs_probs(pi0_probs: np.ndarray, rewards: np.ndarray, eta: float) -> np.ndarray:
    """Row-wise pi0 * exp(r / eta), normalized with max-subtraction."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    with np.errstate(divide="ignore"):
        logits = np.log(pi0_probs) + rewards / eta
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def gibbs_policy(pi0: Policy, table: FeatureTable, theta_combined: ThetaLike, eta: float) -> Policy:
    """KL-regularized optimal policy for reward <theta_combined, phi>."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    theta = _as_theta(theta_combined)
    if pi0.shape != (table.num_prompts, table.num_actions):
        raise ShapeError("reference policy does not match the feature table")
    if not np.any(theta):
        return Policy(pi0.probs)
    return Policy(gibbs_probs(pi0.probs, table.rewards(theta), eta))


def combined_theta(theta1, theta_constraints, lam) -> np.ndarray:
    """theta_1 + sum_k lambda_k theta_k."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam < 0):
        raise DomainError("multipliers must be nonnegative")
    thetas = np.atleast_2d(np.asarray(theta_constraints, dtype=float))
    if thetas.shape[0] != lam.shape[0]:
        raise ShapeError(f"{thetas.shape[0]} constraint parameters but {lam.shape[0]} multipliers")
    return np.asarray(theta1, dtype=float) + lam @ thetas


def _threshold_bracket(pi0_probs, rewards, eta, divergence):
    rows = np.arange(rewards.shape[0])
    best = np.argmax(rewards, axis=1)
    # tau at which the best action alone carries all the mass, and tau at
    # which every ratio pi/pi0 is at most one
    lo = rewards[rows, best] - eta * divergence.fprime(1.0 / pi0_probs[rows, best])
    hi = rewards.max(axis=1)
    return lo, hi


def _ratios(rewards, tau, eta, divergence):
    return divergence.fprime_inv_clipped((rewards - tau[:, None]) / eta)


def f_divergence_probs(pi0_probs: np.ndarray, rewards: np.ndarray, eta: float,
                       divergence: Divergence, return_tau: bool = False):
    """Array version of :func:`f_divergence_policy` on a reward matrix."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    if divergence.name == "kl":
        p = gibbs_probs(pi0_probs, rewards, eta)
        if return_tau:
            # log-partition form of the threshold for the KL generator
            with np.errstate(divide="ignore"):
                z = np.log(pi0_probs) + rewards / eta
            zmax = z.max(axis=1)
            lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
            return p, eta * (lse - 1.0)
        return p
    lo, hi = _threshold_bracket(pi0_probs, rewards, eta, divergence)
    s_lo = (pi0_probs * _ratios(rewards, lo, eta, divergence)).sum(axis=1)
    s_hi = (pi0_probs * _ratios(rewards, hi, eta, divergence)).sum(axis=1)
    if np.any(s_lo < 1.0 - SIMPLEX_TOL) or np.any(s_hi > 1.0 + SIMPLEX_TOL):
        bad = int(np.argmax((s_lo < 1.0 - SIMPLEX_TOL) | (s_hi > 1.0 + SIMPLEX_TOL)))
        raise NumericalError(
            f"threshold bracket [{lo[bad]:.6g}, {hi[bad]:.6g}] does not enclose the root "
            f"for prompt {bad}: sums {s_lo[bad]:.6g}, {s_hi[bad]:.6g}"
        )
    for _ in range(MAX_BISECT):
        mid = 0.5 * (lo + hi)
        s_mid = (pi0_probs * _ratios(rewards, mid, eta, divergence)).sum(axis=1)
        above = s_mid > 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        s_lo = np.where(above, s_mid, s_lo)
        s_hi = np.where(above, s_hi, s_mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi))):
            break
    use_lo = np.abs(s_lo - 1.0) < np.abs(s_hi - 1.0)
    tau = np.where(use_lo, lo, hi)
    p = pi0_probs * _ratios(rewards, tau, eta, divergence)
    sums = p.sum(axis=1)
    if not np.all(np.isfinite(sums)) or np.abs(sums - 1.0).max() > SIMPLEX_TOL:
        raise NumericalError(f"threshold search left a simplex residual of {np.abs(sums - 1.0).max():.3e}")
    p /= sums[:, None]
    if return_tau:
        return p, tau
    return p


def f_divergence_policy(pi0: Policy, table: FeatureTable, theta_combined: ThetaLike,
                        eta: float, divergence: Divergence, return_tau: bool = False):
    """Optimal policy under f-divergence regularization toward ``pi0``.

    Returns the policy, and the per-prompt thresholds when ``return_tau``.
    """
    if isinstance(divergence, str):
        divergence = Divergence.parse(divergence)
    if pi0.shape != (table.num_prompts, table.num_actions):
        raise ShapeError("reference policy does not match the feature table")
    if divergence.name == "kl" and not return_tau:
        return gibbs_policy(pi0, table, theta_combined, eta)
    out = f_divergence_probs(pi0.probs, table.rewards(theta_combined), eta, divergence, return_tau)
    if return_tau:
        return Policy(out[0]), out[1]
    return Policy(out)


def optimal_probs(pi0_probs, rewards, eta, divergence: Divergence = KL) -> np.ndarray:
    if divergence.name == "kl":
        return gibbs_probs(pi0_probs, rewards, eta)
    return f_divergence_probs(pi0_probs, rewards, eta, divergence)


def kkt_residuals(probs, pi0_probs, rewards, eta, divergence: Divergence, tau):
    """Per-prompt stationarity and boundary residuals of the regularized problem.

    Returns ``(stationarity, boundary)``: the largest |eta f'(pi/pi0) - r + tau|
    over positive entries, and the largest violation of
    ``eta f'(0+) >= r - tau`` over zero entries (zero when f'(0+) is -inf).
    """
    probs = np.asarray(probs, dtype=float)
    tau = np.asarray(tau, dtype=float)[:, None]
    pos = probs > 0
    t = np.where(pos, probs / pi0_probs, 1.0)
    stat = np.where(pos, np.abs(eta * divergence.fprime(t) - rewards + tau), 0.0).max(axis=1)
    f0 = divergence.fprime_at_zero()
    if np.isfinite(f0):
        bnd = np.where(~pos, np.maximum(rewards - tau - eta * f0, 0.0), 0.0).max(axis=1)
    else:
        bnd = np.zeros(probs.shape[0])
    return stat, bnd
