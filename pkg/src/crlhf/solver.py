"""Projected gradient descent on the estimated dual, with iterate averaging.

Each iteration forms the optimal regularized policy for the current
multipliers, computes the exact dual gradient (expected constraint reward
minus threshold), and takes a projected step onto the box [0, R]^m. The
returned multiplier is the average of lambda_0, ..., lambda_{T-1}.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import FeatureTable, Policy, ProblemSpec, Divergence, primal_objective, stack_thetas
from .dual import DualFunction
from .exceptions import DomainError
from .oracle import minimize_dual


@dataclass
class SolverConfig:
    """Settings for :func:`solve_dual`.

    ``step_size=None`` with ``step_mode="fixed"`` uses ``eta / B^2``.
    ``bound_B=None`` uses the root sum of squares over constraints of the
    largest absolute estimated constraint reward, an upper bound on the
    Lipschitz constant of the dual gradient times eta.
    """

    radius_R: float = 100.0
    iterations_T: int = 1000
    step_mode: str = "fixed"
    step_size: float = None
    bound_B: float = None
    multiplier_range: tuple = (100.0, 10_000.0)
    gap_cap: float = 1.0
    epsilon_acc: float = 1e-8
    alpha_max: float = 1.0
    record_values: bool = True

    def __post_init__(self):
        if not self.radius_R > 0:
            raise DomainError("radius_R must be positive")
        if int(self.iterations_T) < 1:
            raise DomainError("iterations_T must be at least 1")
        if self.step_mode not in ("fixed", "adaptive"):
            raise DomainError(f"unknown step_mode {self.step_mode!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise DomainError("step_size must be positive")
        lo, hi = self.multiplier_range
        if not 0 < lo <= hi:
            raise DomainError("multiplier_range must satisfy 0 < lo <= hi")
        if not self.gap_cap > 0 or not self.alpha_max > 0 or not self.epsilon_acc > 0:
            raise DomainError("gap_cap, alpha_max and epsilon_acc must be positive")


@dataclass(eq=False)
class SolverTrace:
    """Per-iteration record of the projected-gradient run."""

    lambdas: np.ndarray  # (T, m): lambda_0 .. lambda_{T-1}
    gradients: np.ndarray  # (T, m)
    alphas: np.ndarray  # (T, m)
    dual_values: np.ndarray  # (T,)
    lambda_final: np.ndarray  # lambda_T
    lambda_bar: np.ndarray
    policy: Policy  # estimated-reward policy at lambda_bar
    bound_B: float
    radius_R: float
    config: SolverConfig = field(repr=False, default=None)

    @property
    def T(self) -> int:
        return self.lambdas.shape[0]

    def to_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        m = self.lambdas.shape[1]
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["t"] + [f"lambda{k}" for k in range(m)] + [f"grad{k}" for k in range(m)]
        cols += [f"alpha{k}" for k in range(m)] if m > 1 else ["alpha"]
        writer.writerow(cols + ["dual_value"])
        for t in range(self.T):
            row = [t] + [_fmt(v) for v in self.lambdas[t]] + [_fmt(v) for v in self.gradients[t]]
            row += [_fmt(v) for v in self.alphas[t]]
            writer.writerow(row + [_fmt(self.dual_values[t])])
        return buf.getvalue()


def _fmt(v) -> str:
    return format(float(v), ".17g")


def multiplier(gap, config: SolverConfig):
    """Affine map of the clipped constraint gap onto ``multiplier_range``."""
    lo, hi = config.multiplier_range
    frac = np.minimum(np.abs(gap), config.gap_cap) / config.gap_cap
    return lo + (hi - lo) * frac


def adaptive_step(gradient_history, constraint_gap, config: SolverConfig, eta: float,
                  bound_B: float):
    """Step size scaled by the distance to the constraint boundary.

    ``gradient_history`` holds g'(lambda_1), ..., g'(lambda_t) (empty at
    t = 0), one row per iterate; the step is computed per coordinate.
    """
    hist = np.asarray(gradient_history, dtype=float)
    gap = np.atleast_1d(np.asarray(constraint_gap, dtype=float))
    energy = (hist**2).sum(axis=0) if hist.size else np.zeros_like(gap)
    alpha = eta * multiplier(gap, config) / (bound_B**2 * np.sqrt(config.epsilon_acc + energy))
    return np.minimum(alpha, config.alpha_max)


def step_bound(table: FeatureTable, theta_constraints) -> float:
    """sqrt(sum_k max |r_k|^2) over the constrained oracles."""
    thetas = stack_thetas(theta_constraints)
    return float(np.sqrt(sum(np.abs(table.rewards(t)).max() ** 2 for t in thetas)))


def solve_dual(spec: ProblemSpec, pi0: Policy, table: FeatureTable, theta_hats,
               config: SolverConfig = None) -> SolverTrace:
    """Run projected gradient descent on the dual built from ``theta_hats``.

    ``theta_hats`` lists the target parameter first, then one per constraint.
    """
    config = config or SolverConfig()
    thetas = stack_thetas(theta_hats)
    dual = DualFunction(spec, pi0, table, thetas[0], thetas[1:])
    m = dual.num_constraints
    T = int(config.iterations_T)
    R = float(config.radius_R)
    B = config.bound_B if config.bound_B is not None else step_bound(table, thetas[1:])
    if config.step_mode == "fixed":
        if config.step_size is not None:
            fixed = config.step_size
        elif B > 0:
            fixed = spec.eta / B**2
        else:
            raise DomainError("constraint rewards are identically zero; give step_size explicitly")
    elif not B > 0:
        raise DomainError("adaptive steps need a positive bound_B")

    lambdas = np.empty((T, m))
    grads = np.empty((T, m))
    alphas = np.empty((T, m))
    values = np.full(T, np.nan)
    lam = np.zeros(m)
    for t in range(T):
        probs = dual.probs(lam)
        grad = dual.constraint_means(probs) - dual.j_min
        lambdas[t] = lam
        grads[t] = grad
        if config.record_values:
            values[t] = dual.value(lam)
        if config.step_mode == "fixed":
            alpha = np.full(m, fixed)
        else:
            alpha = adaptive_step(grads[1:t + 1], grad, config, spec.eta, B)
        alphas[t] = alpha
        lam = np.clip(lam - alpha * grad, 0.0, R)
    lambda_bar = np.clip(lambdas.mean(axis=0), 0.0, R)
    policy = dual.policy(lambda_bar)
    return SolverTrace(lambdas, grads, alphas, values, lam, lambda_bar, policy, float(B), R, config)


@dataclass(frozen=True)
class SolutionMetrics:
    lambda_bar: np.ndarray
    lambda_star: np.ndarray
    dual_gap: float
    violation: np.ndarray  # positive part, per constraint, true-reward policy at lambda_bar
    primal_gap: float
    signed_violation: np.ndarray
    deployed_violation: np.ndarray  # same quantities for the estimated-reward policy
    deployed_primal_gap: float
    deployed_signed_violation: np.ndarray
    optimal_value: float


def evaluate_solution(trace: SolverTrace, true_thetas, spec: ProblemSpec, pi0: Policy,
                      table: FeatureTable, lambda_star=None) -> SolutionMetrics:
    """Score a solver run against ground-truth rewards with exact expectations.

    The performance bounds concern the true-reward optimal
    policy at ``lambda_bar``; the metrics for the policy actually returned by
    the solver (built from estimated rewards) are reported alongside.
    """
    thetas = stack_thetas(true_thetas)
    dual = DualFunction(spec, pi0, table, thetas[0], thetas[1:])
    if lambda_star is None:
        radius = max(trace.radius_R, float(np.max(trace.lambda_bar)) + 1.0)
        lambda_star = minimize_dual(dual, None if dual.num_constraints == 1 else radius)
    lambda_star = np.atleast_1d(np.asarray(lambda_star, dtype=float))
    g_star = dual.value(lambda_star)
    pi_star = dual.policy(lambda_star)
    opt = primal_objective(pi_star, spec, thetas[0], table, pi0)

    lam_bar = trace.lambda_bar
    pi_bar = dual.policy(lam_bar)
    signed = dual.j_min - dual.constraint_means(pi_bar.probs)
    deployed_signed = dual.j_min - dual.constraint_means(trace.policy.probs)
    return SolutionMetrics(
        lambda_bar=lam_bar.copy(),
        lambda_star=lambda_star,
        dual_gap=float(dual.value(lam_bar) - g_star),
        violation=np.maximum(signed, 0.0),
        primal_gap=float(opt - primal_objective(pi_bar, spec, thetas[0], table, pi0)),
        signed_violation=signed,
        deployed_violation=np.maximum(deployed_signed, 0.0),
        deployed_primal_gap=float(opt - primal_objective(trace.policy, spec, thetas[0], table, pi0)),
        deployed_signed_violation=deployed_signed,
        optimal_value=float(opt),
    )


class ConstrainedPolicyOptimizer(BaseEstimator):
    """Estimator wrapper around :func:`solve_dual`.

    ``fit(table, theta_hats, pi0)`` learns the averaged multiplier;
    ``predict_proba`` returns the per-prompt action distribution.

    Parameters
    ----------
    eta : float
        Divergence weight.
    j_min : float or sequence of float
        One threshold per constrained oracle.
    radius : float
        Projection radius R.
    n_iter : int
        Number of projected-gradient iterations T.
    step : {"fixed", "adaptive"}
    step_size : float, optional
        Fixed step; ``eta / B^2`` when omitted.
    bound_B : float, optional
    divergence : str
        ``"kl"``, ``"chi2"`` or ``"alpha(<a>)"``.
    """

    def __init__(self, eta=0.05, j_min=0.0, radius=100.0, n_iter=1000, step="fixed",
                 step_size=None, bound_B=None, divergence="kl"):
        self.eta = eta
        self.j_min = j_min
        self.radius = radius
        self.n_iter = n_iter
        self.step = step
        self.step_size = step_size
        self.bound_B = bound_B
        self.divergence = divergence

    def _spec(self) -> ProblemSpec:
        div = self.divergence if isinstance(self.divergence, Divergence) else Divergence.parse(self.divergence)
        return ProblemSpec(self.eta, self.j_min, div)

    def fit(self, table: FeatureTable, theta_hats, pi0: Policy = None):
        if pi0 is None:
            pi0 = Policy.uniform(table.num_prompts, table.num_actions)
        config = SolverConfig(radius_R=self.radius, iterations_T=self.n_iter,
                              step_mode=self.step, step_size=self.step_size, bound_B=self.bound_B)
        self.spec_ = self._spec()
        self.trace_ = solve_dual(self.spec_, pi0, table, theta_hats, config)
        self.lambda_bar_ = self.trace_.lambda_bar
        self.policy_ = self.trace_.policy
        self.n_features_in_ = table.dim
        return self

    def predict_proba(self, prompts=None) -> np.ndarray:
        check_is_fitted(self, "policy_")
        probs = self.policy_.probs
        return probs if prompts is None else probs[np.asarray(prompts)]

    def predict(self, prompts=None) -> np.ndarray:
        """Most likely action per prompt."""
        return np.argmax(self.predict_proba(prompts), axis=1)
