"""Domain types and exact expectation primitives over finite prompt/action spaces.

Everything here is dense: a feature table stores one vector per
(prompt, action) pair and every expectation is an explicit weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .exceptions import DomainError, ShapeError, SupportError, ValidationError

PROB_TOL = 1e-12
NORM_TOL = 1e-12


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Feature vectors phi(x, a) for every prompt x and action a.

    Parameters
    ----------
    features : array of shape (num_prompts, num_actions, dim)
        Each vector must have Euclidean norm at most one.
    prompt_dist : array of shape (num_prompts,), optional
        Prompt distribution; uniform when omitted.
    """

    features: np.ndarray
    prompt_dist: np.ndarray = None

    def __post_init__(self):
        feats = _frozen(self.features)
        if feats.ndim != 3 or min(feats.shape) < 1:
            raise ShapeError(f"features must have shape (prompts, actions, dim), got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite values")
        norms = np.linalg.norm(feats, axis=2)
        if norms.max() > 1.0 + NORM_TOL:
            x, a = np.unravel_index(np.argmax(norms), norms.shape)
            raise ValidationError(
                f"feature norm {norms[x, a]:.6g} > 1 at prompt {x}, action {a}"
            )
        if self.prompt_dist is None:
            dist = np.full(feats.shape[0], 1.0 / feats.shape[0])
        else:
            dist = np.asarray(self.prompt_dist, dtype=float)
        if dist.shape != (feats.shape[0],):
            raise ShapeError(f"prompt_dist has shape {dist.shape}, expected ({feats.shape[0]},)")
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > PROB_TOL:
            raise ValidationError("prompt_dist must be nonnegative and sum to 1")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "prompt_dist", _frozen(dist))

    @property
    def num_prompts(self) -> int:
        return self.features.shape[0]

    @property
    def num_actions(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def rewards(self, theta) -> np.ndarray:
        """Reward matrix r(x, a) = <theta, phi(x, a)> of shape (prompts, actions)."""
        theta = _as_theta(theta)
        if theta.shape != (self.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        return self.features @ theta


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Linear reward parameter with a norm cap."""

    theta: np.ndarray
    bound_B: float = 1.0

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 1:
            raise ShapeError("theta must be a vector")
        if not self.bound_B > 0:
            raise DomainError("bound_B must be positive")
        norm = float(np.linalg.norm(theta))
        if norm > self.bound_B * (1.0 + 1e-12):
            raise ValidationError(f"||theta|| = {norm:.6g} exceeds bound_B = {self.bound_B:.6g}")
        object.__setattr__(self, "theta", theta)


ThetaLike = Union[RewardModel, np.ndarray]


def _as_theta(theta: ThetaLike) -> np.ndarray:
    if isinstance(theta, RewardModel):
        return theta.theta
    return np.asarray(theta, dtype=float)


def stack_thetas(thetas) -> np.ndarray:
    """Stack one or more parameters (arrays or RewardModels) into an (m, d) array."""
    if isinstance(thetas, RewardModel):
        return thetas.theta[None, :]
    if isinstance(thetas, (list, tuple)):
        return np.atleast_2d(np.stack([_as_theta(t) for t in thetas]))
    return np.atleast_2d(np.asarray(thetas, dtype=float))


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic matrix of action probabilities, one row per prompt."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise ShapeError(f"policy must be 2-D (prompts, actions), got {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValidationError("policy entries must be finite and nonnegative")
        err = np.abs(probs.sum(axis=1) - 1.0)
        if err.max() > PROB_TOL:
            x = int(np.argmax(err))
            raise ValidationError(
                f"policy row for prompt {x} sums to {probs[x].sum():.17g}, not 1"
            )
        object.__setattr__(self, "probs", probs)

    @property
    def shape(self):
        return self.probs.shape

    def check_full_support(self) -> "Policy":
        if np.any(self.probs <= 0):
            x, a = np.argwhere(self.probs <= 0)[0]
            raise SupportError(f"reference policy has zero mass at prompt {x}, action {a}")
        return self

    @classmethod
    def uniform(cls, num_prompts: int, num_actions: int) -> "Policy":
        return cls(np.full((num_prompts, num_actions), 1.0 / num_actions))

    @classmethod
    def from_logits(cls, logits) -> "Policy":
        logits = np.asarray(logits, dtype=float)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return cls(p)


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Pairwise comparisons labeled by every oracle.

    ``labels[i, k] == 1`` means oracle ``k`` preferred ``actions1[i]`` over
    ``actions2[i]`` for prompt ``prompts[i]``. Column 0 is the target oracle,
    the remaining columns are the constrained oracles.
    """

    prompts: np.ndarray
    actions1: np.ndarray
    actions2: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        prompts = _frozen(self.prompts, np.int64)
        a1 = _frozen(self.actions1, np.int64)
        a2 = _frozen(self.actions2, np.int64)
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            labels = labels[:, None]
        n = prompts.shape[0]
        if prompts.ndim != 1 or a1.shape != (n,) or a2.shape != (n,) or labels.shape[0] != n:
            raise ShapeError("prompts, actions and labels must have matching lengths")
        if n < 1:
            raise ValidationError("dataset must contain at least one record")
        if labels.shape[1] < 2:
            raise ValidationError("need labels from at least two oracles")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValidationError("labels must be 0 or 1")
        if min(prompts.min(), a1.min(), a2.min()) < 0:
            raise ValidationError("indices must be nonnegative")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "actions1", a1)
        object.__setattr__(self, "actions2", a2)
        object.__setattr__(self, "labels", _frozen(labels, np.int8))

    def __len__(self) -> int:
        return self.prompts.shape[0]

    @property
    def num_oracles(self) -> int:
        return self.labels.shape[1]

    def head(self, n: int) -> "PreferenceDataset":
        """First ``n`` records."""
        return PreferenceDataset(
            self.prompts[:n], self.actions1[:n], self.actions2[:n], self.labels[:n]
        )

    def check_against(self, table: FeatureTable) -> "PreferenceDataset":
        if self.prompts.max() >= table.num_prompts:
            raise ValidationError("prompt index out of range for feature table")
        if max(self.actions1.max(), self.actions2.max()) >= table.num_actions:
            raise ValidationError("action index out of range for feature table")
        return self

    def deltas(self, table: FeatureTable) -> np.ndarray:
        """Feature differences phi(x, a1) - phi(x, a2), shape (N, dim)."""
        self.check_against(table)
        f = table.features
        return f[self.prompts, self.actions1] - f[self.prompts, self.actions2]


@dataclass(frozen=True)
class Divergence:
    """An f-divergence generator: ``kl``, ``chi2`` (Pearson) or ``alpha``.

    The alpha family uses f(t) = (t**a - 1 - a (t - 1)) / (a (a - 1)),
    whose derivative inverse gives the clipped power-law policy.
    """

    name: str = "kl"
    alpha: float = None

    def __post_init__(self):
        if self.name not in ("kl", "chi2", "alpha"):
            raise DomainError(f"unknown divergence {self.name!r}")
        if self.name == "alpha":
            if self.alpha is None or not self.alpha > 0 or self.alpha == 1:
                raise DomainError("alpha divergence needs alpha > 0, alpha != 1")
        elif self.alpha is not None:
            raise DomainError("alpha parameter only applies to the alpha divergence")

    def __str__(self):
        return f"alpha({self.alpha:g})" if self.name == "alpha" else self.name

    @classmethod
    def parse(cls, text: str) -> "Divergence":
        text = text.strip().lower()
        if text.startswith("alpha"):
            inner = text[len("alpha"):].strip("():= ")
            return cls("alpha", float(inner))
        if text in ("chi-square", "chi2", "chisquare"):
            return cls("chi2")
        return cls(text)

    def f(self, t):
        t = np.asarray(t, dtype=float)
        if self.name == "kl":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
        if self.name == "chi2":
            return (t - 1.0) ** 2
        a = self.alpha
        return (t**a - 1.0 - a * (t - 1.0)) / (a * (a - 1.0))

    def fprime(self, t):
        t = np.asarray(t, dtype=float)
        if self.name == "kl":
            return np.log(t) + 1.0
        if self.name == "chi2":
            return 2.0 * (t - 1.0)
        a = self.alpha
        with np.errstate(divide="ignore"):
            return (t ** (a - 1.0) - 1.0) / (a - 1.0)

    def fprime_at_zero(self) -> float:
        """Right limit of f' at zero (may be -inf)."""
        if self.name == "chi2":
            return -2.0
        if self.name == "alpha" and self.alpha > 1:
            return -1.0 / (self.alpha - 1.0)
        return -np.inf

    def fprime_sup(self) -> float:
        """Supremum of the range of f' (finite only for alpha < 1)."""
        if self.name == "alpha" and self.alpha < 1:
            return 1.0 / (1.0 - self.alpha)
        return np.inf

    def fprime_inv_clipped(self, u):
        """[(f')^{-1}(u)]_+ : zero below the range of f', +inf above it."""
        u = np.asarray(u, dtype=float)
        if self.name == "kl":
            return np.exp(u - 1.0)
        if self.name == "chi2":
            return np.maximum(1.0 + u / 2.0, 0.0)
        a = self.alpha
        base = 1.0 + (a - 1.0) * u
        if a > 1:
            return np.maximum(base, 0.0) ** (1.0 / (a - 1.0))
        with np.errstate(divide="ignore"):
            return np.where(base > 0, np.maximum(base, 1e-300) ** (1.0 / (a - 1.0)), np.inf)


KL = Divergence("kl")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Regularization weight, one threshold per constrained oracle, and divergence."""

    eta: float
    j_min: np.ndarray = field(default_factory=lambda: np.zeros(1))
    divergence: Divergence = KL

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError("eta must be positive")
        j_min = np.atleast_1d(np.asarray(self.j_min, dtype=float))
        if j_min.ndim != 1:
            raise ShapeError("j_min must be a scalar or vector")
        object.__setattr__(self, "j_min", _frozen(j_min))
        if isinstance(self.divergence, str):
            object.__setattr__(self, "divergence", Divergence.parse(self.divergence))

    @property
    def num_constraints(self) -> int:
        return self.j_min.shape[0]


def _check_policy_table(policy: Policy, table: FeatureTable):
    if policy.shape != (table.num_prompts, table.num_actions):
        raise ShapeError(
            f"policy shape {policy.shape} does not match table "
            f"({table.num_prompts}, {table.num_actions})"
        )


def expectation(policy: Policy, values: np.ndarray, prompt_dist: np.ndarray) -> float:
    """E_{x~d0} E_{a~pi(.|x)} values[x, a]."""
    return float(prompt_dist @ np.einsum("xa,xa->x", policy.probs, values))


def expected_reward(policy: Policy, model: ThetaLike, table: FeatureTable) -> float:
    """Exact expected linear reward under ``policy`` and the table's prompt distribution."""
    _check_policy_table(policy, table)
    return expectation(policy, table.rewards(model), table.prompt_dist)


def divergence_per_prompt(pi: Policy, pi0: Policy, divergence: Divergence = KL) -> np.ndarray:
    if pi.shape != pi0.shape:
        raise ShapeError(f"policy shapes differ: {pi.shape} vs {pi0.shape}")
    p, q = pi.probs, pi0.probs
    bad = (q <= 0) & (p > 0)
    if np.any(bad):
        x, a = np.argwhere(bad)[0]
        raise SupportError(f"reference has zero mass at prompt {x}, action {a} where policy is positive")
    if divergence.name == "kl":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(np.where(q > 0, q, 1.0))), 0.0)
        return terms.sum(axis=1)
    safe_q = np.where(q > 0, q, 1.0)
    return np.where(q > 0, q * divergence.f(p / safe_q), 0.0).sum(axis=1)


def kl_divergence(pi: Policy, pi0: Policy, prompt_dist) -> float:
    """Prompt-averaged KL(pi || pi0), with 0 log 0 = 0."""
    return float(np.asarray(prompt_dist) @ divergence_per_prompt(pi, pi0, KL))


def f_divergence(pi: Policy, pi0: Policy, prompt_dist, divergence: Divergence) -> float:
    return float(np.asarray(prompt_dist) @ divergence_per_prompt(pi, pi0, divergence))


def primal_objective(pi: Policy, spec: ProblemSpec, model1: ThetaLike,
                     table: FeatureTable, pi0: Policy) -> float:
    """Target reward minus eta times the divergence from the reference policy."""
    reward = expected_reward(pi, model1, table)
    return reward - spec.eta * f_divergence(pi, pi0, table.prompt_dist, spec.divergence)


def constraint_value(pi: Policy, spec: ProblemSpec, model_k: ThetaLike,
                     table: FeatureTable, k: int = 0) -> float:
    """J_min[k] - E_pi[r_k]; nonpositive means the constraint holds."""
    return float(spec.j_min[k]) - expected_reward(pi, model_k, table)
