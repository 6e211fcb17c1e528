import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import random_policy, random_table, random_theta
from crlhf.core import Divergence, FeatureTable, Policy, f_divergence
from crlhf.exceptions import DomainError
from crlhf.policy import (combined_theta, f_divergence_policy, f_divergence_probs, gibbs_policy,
                          gibbs_probs, kkt_residuals)

CHI2 = Divergence("chi2")


def test_gibbs_zero_theta_is_reference(rng):
    table = random_table(rng)
    pi0 = random_policy(rng, 3, 4, 0.01)
    assert np.array_equal(gibbs_policy(pi0, table, np.zeros(3), 0.1).probs, pi0.probs)


def test_gibbs_large_eta_near_reference(rng):
    table = random_table(rng)
    pi0 = random_policy(rng, 3, 4, 0.01)
    p = gibbs_policy(pi0, table, random_theta(rng, 3), 1e9).probs
    assert 0.5 * np.abs(p - pi0.probs).sum(axis=1).max() < 1e-6


def test_gibbs_hand_example():
    p = gibbs_probs(np.full((1, 3), 1 / 3), np.array([[1.0, 0.0, 0.0]]), 1.0)
    e = np.e
    np.testing.assert_allclose(p[0], [e / (e + 2), 1 / (e + 2), 1 / (e + 2)], rtol=1e-15)


def test_gibbs_no_overflow():
    p = gibbs_probs(np.full((1, 3), 1 / 3), np.array([[1e3, -1e3, 0.0]]), 1e-3)
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


def test_gibbs_rejects_bad_eta(rng):
    with pytest.raises(DomainError):
        gibbs_policy(Policy.uniform(3, 4), random_table(rng), np.ones(3), 0.0)
    with pytest.raises(DomainError):
        combined_theta(np.zeros(2), np.ones((1, 2)), [-0.1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eta=st.floats(0.01, 10.0))
def test_gibbs_rows_positive_and_normalized(seed, eta):
    rng = np.random.default_rng(seed)
    table = random_table(rng, 4, 5, 3)
    pi0 = random_policy(rng, 4, 5, 0.01)
    p = gibbs_policy(pi0, table, 3 * random_theta(rng, 3), eta).probs
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12
    assert np.all(p > 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gibbs_beats_random_perturbations(seed):
    rng = np.random.default_rng(seed)
    eta = 0.5
    pi0 = random_policy(rng, 2, 4, 0.05)
    r = rng.uniform(-1, 1, size=(2, 4))
    p = gibbs_probs(pi0.probs, r, eta)

    def lagrangian(q):
        return float(np.mean((q * r).sum(axis=1)) - eta * f_divergence(Policy(q), pi0, [0.5, 0.5], Divergence("kl")))

    best = lagrangian(p)
    for _ in range(100):
        q = np.clip(p + 0.05 * rng.standard_normal(p.shape), 1e-9, None)
        q /= q.sum(axis=1, keepdims=True)
        assert lagrangian(q) <= best + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), bump=st.floats(0.0, 2.0))
def test_gibbs_monotone_in_own_reward(seed, bump):
    rng = np.random.default_rng(seed)
    pi0 = random_policy(rng, 1, 5, 0.01).probs
    r = rng.uniform(-1, 1, size=(1, 5))
    r2 = r.copy()
    r2[0, 2] += bump
    assert gibbs_probs(pi0, r2, 0.3)[0, 2] >= gibbs_probs(pi0, r, 0.3)[0, 2]


def test_chi2_constant_reward_is_reference(rng):
    pi0 = random_policy(rng, 3, 4, 0.05).probs
    p = f_divergence_probs(pi0, np.full((3, 4), 0.7), 0.2, CHI2)
    np.testing.assert_allclose(p, pi0, atol=1e-14)


def test_chi2_two_actions_matches_direct_maximization():
    eta, r = 0.5, 0.1
    p = f_divergence_probs(np.full((1, 2), 0.5), np.array([[r, -r]]), eta, CHI2)

    def neg(q):
        probs = np.array([q, 1 - q])
        return -(probs @ [r, -r] - eta * (0.5 * ((probs / 0.5 - 1) ** 2)).sum())

    q = minimize_scalar(neg, bounds=(0, 1), method="bounded", options={"xatol": 1e-12}).x
    assert p[0, 0] == pytest.approx(q, abs=1e-8)
    # interior closed form: 1/2 + r / (4 eta) when the clip is inactive
    assert p[0, 0] == pytest.approx(0.5 + r / (4 * eta), abs=1e-12)


def test_chi2_clips_to_zero():
    p = f_divergence_probs(np.full((1, 3), 1 / 3), np.array([[1.0, 0.0, -5.0]]), 0.1, CHI2)
    assert p[0, 2] == 0.0 and p[0, 0] > p[0, 1]


@pytest.mark.parametrize("div", [CHI2, Divergence("alpha", 0.5), Divergence("alpha", 2.0),
                                 Divergence("alpha", 3.0), Divergence("kl")])
def test_kkt_small(div, rng):
    pi0 = random_policy(rng, 20, 5, 0.01).probs
    r = rng.uniform(-1, 1, size=(20, 5))
    p, tau = f_divergence_probs(pi0, r, 0.2, div, return_tau=True)
    stat, bnd = kkt_residuals(p, pi0, r, 0.2, div, tau)
    assert stat.max() <= 1e-8 and bnd.max() <= 1e-8
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-10


def test_policy_wrapper_matches_array_version(rng):
    table = random_table(rng)
    pi0 = random_policy(rng, 3, 4, 0.05)
    theta = random_theta(rng, 3)
    pol, tau = f_divergence_policy(pi0, table, theta, 0.3, "chi2", return_tau=True)
    np.testing.assert_array_equal(pol.probs, f_divergence_probs(pi0.probs, table.rewards(theta), 0.3, CHI2))
    assert tau.shape == (3,)
    np.testing.assert_array_equal(f_divergence_policy(pi0, table, theta, 0.3, "kl").probs,
                                  gibbs_policy(pi0, table, theta, 0.3).probs)


def test_combined_theta():
    np.testing.assert_allclose(combined_theta([1.0, 0.0], [[0.0, 1.0], [1.0, 1.0]], [2.0, 0.5]),
                               [1.5, 2.5])
