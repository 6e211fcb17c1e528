"""Synthetic finite environments, ground-truth oracles and the dataset-size sweep.

Random streams are Philox generators keyed by ``(seed, purpose)`` so that
instances are reproducible and every dataset field is drawn from its own
stream. Drawing fields from separate streams makes the first ``n`` records
of a size-``N`` dataset identical to a size-``n`` dataset for the same seed.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.special import expit

from .certificates import certify
from .core import (Divergence, FeatureTable, Policy, PreferenceDataset, ProblemSpec,
                   constraint_value, primal_objective)
from .dual import DualFunction
from .exceptions import CrlhfError, DomainError, InfeasibleError
from .mle import covariance_bundle, fit_all
from .oracle import minimize_dual
from .solver import SolverConfig, evaluate_solution, solve_dual, step_bound

STREAM_FEATURES = 1
STREAM_THETA = 2
STREAM_PROMPTS = 3
STREAM_ACTION1 = 4
STREAM_ACTION2 = 5
STREAM_LABELS = 6
STREAM_CALIBRATION = 7


def stream(seed: int, purpose: int) -> np.random.Generator:
    """Independent counter-based generator for one (seed, purpose) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(purpose,))))


@dataclass
class SyntheticConfig:
    seed: int = 0
    num_prompts: int = 100
    num_actions: int = 10
    dim: int = 8
    num_constraints: int = 1
    w: float = 0.6
    eta0: float = 0.2
    N_max: int = 3000
    N_step: int = 300
    frac: float = 0.3
    lambda_hi: float = 5.0
    calib_N: int = 10_000

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise DomainError("w must lie in [0, 1]")
        if not self.eta0 > 0:
            raise DomainError("eta0 must be positive")
        if min(self.num_prompts, self.num_actions, self.dim, self.num_constraints) < 1:
            raise DomainError("sizes must be positive")

    @property
    def N_grid(self) -> list:
        return list(range(0, self.N_max + 1, self.N_step))


@dataclass(eq=False)
class SyntheticInstance:
    table: FeatureTable
    thetas: np.ndarray  # (m + 1, d): target first
    pi0: Policy
    config: SyntheticConfig

    @property
    def theta1(self) -> np.ndarray:
        return self.thetas[0]

    @property
    def theta_constraints(self) -> np.ndarray:
        return self.thetas[1:]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_instance(config: SyntheticConfig) -> SyntheticInstance:
    """Gaussian unit-norm features and parameters, softmax reference policy.

    The reference policy tilts toward ``w * theta_1 + (1 - w) * theta_2`` at
    temperature ``eta0``. Features and parameters depend only on the seed, so
    changing ``w`` only changes the reference policy.
    """
    c = config
    feats = _unit_rows(stream(c.seed, STREAM_FEATURES).standard_normal((c.num_prompts, c.num_actions, c.dim)))
    thetas = _unit_rows(stream(c.seed, STREAM_THETA).standard_normal((c.num_constraints + 1, c.dim)))
    table = FeatureTable(feats)
    theta0 = c.w * thetas[0] + (1.0 - c.w) * thetas[1]
    pi0 = Policy.from_logits(table.rewards(theta0) / c.eta0)
    return SyntheticInstance(table, thetas, pi0, config)


def _inverse_cdf(probs_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs_rows, axis=1)
    idx = (u[:, None] * cum[:, -1:] >= cum).sum(axis=1)
    return np.minimum(idx, probs_rows.shape[1] - 1)


def sample_dataset(instance: SyntheticInstance, N: int, seed: int = None) -> PreferenceDataset:
    """Draw N comparisons from d0 x pi0 x pi0 with Bradley-Terry labels per oracle."""
    if N < 1:
        raise DomainError("N must be at least 1")
    seed = instance.config.seed if seed is None else seed
    table, pi0 = instance.table, instance.pi0
    x = np.minimum((stream(seed, STREAM_PROMPTS).random(N) * table.num_prompts).astype(np.int64),
                   table.num_prompts - 1)
    a1 = _inverse_cdf(pi0.probs[x], stream(seed, STREAM_ACTION1).random(N))
    a2 = _inverse_cdf(pi0.probs[x], stream(seed, STREAM_ACTION2).random(N))
    deltas = table.features[x, a1] - table.features[x, a2]
    u = stream(seed, STREAM_LABELS).random((N, instance.thetas.shape[0]))
    labels = (u < expit(deltas @ instance.thetas.T)).astype(np.int8)
    return PreferenceDataset(x, a1, a2, labels)


def calibrate_jmin(instance: SyntheticInstance, eta: float, frac: float = None,
                   lambda_hi: float = None, calib_N: int = None, mode: str = "exact") -> np.ndarray:
    """Constraint thresholds interpolating between the lambda = 0 and lambda = lambda_hi policies.

    ``mode="exact"`` uses exact expectations; ``mode="sample"`` averages the
    ground-truth constraint reward over ``calib_N`` sampled (prompt, action)
    pairs per policy.
    """
    c = instance.config
    frac = c.frac if frac is None else frac
    lambda_hi = c.lambda_hi if lambda_hi is None else lambda_hi
    calib_N = c.calib_N if calib_N is None else calib_N
    if not 0.0 <= frac <= 1.0:
        raise DomainError("frac must lie in [0, 1]")
    m = instance.theta_constraints.shape[0]
    dual = DualFunction(ProblemSpec(eta, np.zeros(m)), instance.pi0, instance.table,
                        instance.theta1, instance.theta_constraints)
    p0 = dual.probs(np.zeros(m))
    p_hi = dual.probs(np.full(m, lambda_hi))
    if mode == "exact":
        e0 = dual.constraint_means(p0)
        e_hi = dual.constraint_means(p_hi)
    elif mode == "sample":
        rng = stream(c.seed, STREAM_CALIBRATION)
        e0, e_hi = (_sampled_means(dual, p, rng, calib_N) for p in (p0, p_hi))
    else:
        raise DomainError(f"unknown calibration mode {mode!r}")
    return e0 + frac * (e_hi - e0)


def _sampled_means(dual: DualFunction, probs, rng, n) -> np.ndarray:
    x = np.minimum((rng.random(n) * probs.shape[0]).astype(np.int64), probs.shape[0] - 1)
    a = _inverse_cdf(probs[x], rng.random(n))
    return dual.rc[:, x, a].mean(axis=1)


def oracle_lambda_star(instance: SyntheticInstance, spec: ProblemSpec, radius: float = None):
    """Ground-truth optimal multiplier and policy from the true reward parameters."""
    dual = DualFunction(spec, instance.pi0, instance.table, instance.theta1, instance.theta_constraints)
    if dual.num_constraints > 1 and radius is None:
        radius = 4.0 * instance.config.lambda_hi
    lam = minimize_dual(dual, radius)
    return lam, dual.policy(lam)


def brute_force_primal(table: FeatureTable, pi0: Policy, theta1, theta_constraints,
                       spec: ProblemSpec, restarts: int = 6, seed: int = 0) -> Policy:
    """Direct constrained maximization over the product of simplices (no duality).

    Runs SLSQP from the reference policy and from random Dirichlet starts,
    keeps the best feasible point, and polishes it with a second solve.
    Intended for tiny instances.
    """
    X, A = table.num_prompts, table.num_actions
    d0 = table.prompt_dist
    r1 = table.rewards(theta1)
    rc = np.stack([table.rewards(t) for t in np.atleast_2d(theta_constraints)])
    q = pi0.probs
    div = spec.divergence
    weight = np.repeat(d0, A)

    def neg_obj(v):
        p = v.reshape(X, A)
        val = d0 @ ((p * r1).sum(axis=1) - spec.eta * (q * div.f(p / q)).sum(axis=1))
        return -val

    def neg_grad(v):
        p = v.reshape(X, A)
        return -(weight * (r1 - spec.eta * div.fprime(p / q)).ravel())

    constraints = [{"type": "eq", "fun": lambda v, i=i: v.reshape(X, A)[i].sum() - 1.0,
                    "jac": lambda v, i=i: np.eye(X)[i].repeat(A)} for i in range(X)]
    for k in range(rc.shape[0]):
        if np.isfinite(spec.j_min[k]):
            constraints.append({
                "type": "ineq",
                "fun": lambda v, k=k: d0 @ (v.reshape(X, A) * rc[k]).sum(axis=1) - spec.j_min[k],
                "jac": lambda v, k=k: weight * rc[k].ravel(),
            })
    lower = 0.0 if np.isfinite(div.fprime_at_zero()) else 1e-15
    bounds = [(lower, 1.0)] * (X * A)

    def feasible(v, tol=1e-9):
        p = v.reshape(X, A)
        ok = np.all(np.abs(p.sum(axis=1) - 1) <= tol) and np.all(p >= lower - tol)
        for k in range(rc.shape[0]):
            if np.isfinite(spec.j_min[k]):
                ok &= d0 @ (p * rc[k]).sum(axis=1) >= spec.j_min[k] - tol
        return bool(ok)

    rng = np.random.default_rng(seed)
    starts = [q.ravel()] + [rng.dirichlet(np.ones(A), size=X).ravel() for _ in range(restarts)]
    best, best_val = None, np.inf
    opts = {"ftol": 1e-15, "maxiter": 3000}
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Values in x were outside bounds")
        for start in starts:
            res = minimize(neg_obj, np.maximum(start, lower), jac=neg_grad, method="SLSQP",
                           bounds=bounds, constraints=constraints, options=opts)
            if feasible(res.x) and res.fun < best_val:
                best, best_val = res.x, res.fun
        if best is None:
            raise InfeasibleError("no feasible policy found by direct search")
        res = minimize(neg_obj, best, jac=neg_grad, method="SLSQP", bounds=bounds,
                       constraints=constraints, options=opts)
    if feasible(res.x) and res.fun <= best_val:
        best = res.x
    p = np.maximum(best.reshape(X, A), 0.0)
    return Policy(p / p.sum(axis=1, keepdims=True))


@dataclass
class SweepConfig:
    """Dataset-size sweep over seeds and reference-policy mixing weights."""

    base: SyntheticConfig = field(default_factory=SyntheticConfig)
    ws: tuple = (0.3, 0.6, 0.9)
    seeds: tuple = (0, 1, 2, 3, 4)
    eta: float = 0.05
    T: int = 1000
    lambda_reg: float = 0.01
    delta: float = 0.05
    C: float = 1.0
    CK2: float = 1.0
    fallback_R: float = 100.0
    step_mode: str = "fixed"
    N_grid: tuple = None
    n_jobs: int = 1

    def grid(self) -> list:
        return list(self.N_grid) if self.N_grid is not None else self.base.N_grid


SWEEP_COLUMNS = [
    "w", "seed", "N", "suboptimality", "violation", "signed_violation", "lambda_bar",
    "lambda_star", "j_min", "dual_gap", "violation_at_lambda_bar", "primal_gap_at_lambda_bar",
    "theta_err_target", "theta_err_constraint", "mahalanobis_err_max", "mle_event",
    "beta_N", "min_eig", "bound_B", "step_B", "R", "Lambda", "slater_certified",
    "thm2_dual_gap", "thm2_violation", "thm2_primal_gap", "failure_probability",
]


def run_cell(instance: SyntheticInstance, dataset: PreferenceDataset, N: int, j_min,
             lambda_star, cfg: SweepConfig) -> dict:
    """Fit, certify, solve and score one (instance, N) cell."""
    spec = ProblemSpec(cfg.eta, j_min)
    c = instance.config
    row = {"w": c.w, "seed": c.seed, "N": N, "j_min": float(spec.j_min[0]),
           "lambda_star": float(lambda_star[0])}
    true_dual = DualFunction(spec, instance.pi0, instance.table, instance.theta1,
                             instance.theta_constraints)
    pi_star = true_dual.policy(lambda_star)
    opt = primal_objective(pi_star, spec, instance.theta1, instance.table, instance.pi0)
    if N == 0:
        # no data: the estimated rewards are zero and the returned policy is pi0
        signed = constraint_value(instance.pi0, spec, instance.theta_constraints[0], instance.table)
        row.update(suboptimality=opt - primal_objective(instance.pi0, spec, instance.theta1,
                                                        instance.table, instance.pi0),
                   violation=max(signed, 0.0), signed_violation=signed)
        return {k: row.get(k, np.nan) for k in SWEEP_COLUMNS}

    data = dataset.head(N)
    fits = fit_all(data, instance.table, cfg.lambda_reg)
    theta_hats = np.stack([f.theta_hat for f in fits])
    cov = covariance_bundle(data.deltas(instance.table), cfg.lambda_reg)
    maha = max(cov.norm(theta_hats[k] - instance.thetas[k]) for k in range(len(fits)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = certify(instance.table, instance.pi0, data, theta_hats, spec, delta=cfg.delta,
                         C=cfg.C, CK2=cfg.CK2, lambda_reg=cfg.lambda_reg, T=cfg.T,
                         true_thetas=instance.thetas, fallback_R=cfg.fallback_R)
    solver_cfg = SolverConfig(radius_R=report.R, iterations_T=cfg.T, step_mode=cfg.step_mode,
                              record_values=False)
    trace = solve_dual(spec, instance.pi0, instance.table, theta_hats, solver_cfg)
    metrics = evaluate_solution(trace, instance.thetas, spec, instance.pi0, instance.table,
                                lambda_star)
    row.update(
        suboptimality=metrics.deployed_primal_gap,
        violation=float(metrics.deployed_violation[0]),
        signed_violation=float(metrics.deployed_signed_violation[0]),
        lambda_bar=float(trace.lambda_bar[0]),
        dual_gap=metrics.dual_gap,
        violation_at_lambda_bar=float(metrics.violation[0]),
        primal_gap_at_lambda_bar=metrics.primal_gap,
        theta_err_target=float(np.linalg.norm(theta_hats[0] - instance.thetas[0])),
        theta_err_constraint=float(np.linalg.norm(theta_hats[1] - instance.thetas[1])),
        mahalanobis_err_max=maha,
        mle_event=bool(maha <= report.beta_N),
        beta_N=report.beta_N, min_eig=report.min_eig, bound_B=report.bound_B,
        step_B=trace.bound_B, R=report.R, Lambda=report.Lambda,
        slater_certified=report.slater_certified,
        thm2_dual_gap=report.thm2_dual_gap, thm2_violation=report.thm2_violation,
        thm2_primal_gap=report.thm2_primal_gap,
        failure_probability=report.failure_probability,
    )
    return {k: row.get(k, np.nan) for k in SWEEP_COLUMNS}


def _run_seed(cfg: SweepConfig, w: float, seed: int) -> list:
    base = replace(cfg.base, w=w, seed=seed, num_constraints=1)
    instance = generate_instance(base)
    j_min = calibrate_jmin(instance, cfg.eta)
    spec = ProblemSpec(cfg.eta, j_min)
    lambda_star, _ = oracle_lambda_star(instance, spec)
    grid = cfg.grid()
    n_max = max(grid)
    dataset = sample_dataset(instance, n_max) if n_max > 0 else None
    return [run_cell(instance, dataset, N, j_min, lambda_star, cfg) for N in grid]


@dataclass
class SweepReport:
    rows: list
    config: SweepConfig

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def select(self, **where) -> list:
        return [r for r in self.rows if all(np.isclose(r[k], v) for k, v in where.items())]

    def aggregate(self, metric: str) -> list:
        """Mean and standard error across seeds for every (w, N)."""
        out = []
        for w in self.config.ws:
            for N in self.config.grid():
                vals = np.array([r[metric] for r in self.select(w=w, N=N)], dtype=float)
                vals = vals[np.isfinite(vals)]
                n = vals.size
                mean = float(vals.mean()) if n else np.nan
                se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan
                out.append({"w": w, "N": N, "metric": metric, "mean": mean, "stderr": se, "n_seeds": n})
        return out

    def to_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _cell(v) for k, v in r.items()})
        return buf.getvalue()

    def to_long_csv(self, metrics=("suboptimality", "violation"), header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        writer = csv.DictWriter(buf, fieldnames=["w", "N", "metric", "mean", "stderr", "n_seeds"],
                                lineterminator="\n")
        writer.writeheader()
        for metric in metrics:
            for r in self.aggregate(metric):
                writer.writerow({k: _cell(v) for k, v in r.items()})
        return buf.getvalue()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def run_sweep(cfg: SweepConfig) -> SweepReport:
    """Every (w, seed, N) cell; seeds and weights run in parallel when ``n_jobs > 1``."""
    jobs = [(w, s) for w in cfg.ws for s in cfg.seeds]
    results = Parallel(n_jobs=cfg.n_jobs)(delayed(_run_seed)(cfg, w, s) for w, s in jobs)
    rows = [row for block in results for row in block]
    return SweepReport(rows, cfg)
