import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_policy, random_table, random_theta
from crlhf.core import Divergence, FeatureTable, Policy, ProblemSpec
from crlhf.dual import DualFunction, eval_dual, lipschitz_constant, strong_convexity_modulus
from crlhf.exceptions import DomainError


def _dual(seed, m=1, eta=0.3, divergence=Divergence("kl"), X=4, A=5, d=3):
    rng = np.random.default_rng(seed)
    table = random_table(rng, X, A, d)
    pi0 = random_policy(rng, X, A, 0.02)
    thetas = np.stack([random_theta(rng, d) for _ in range(m + 1)])
    spec = ProblemSpec(eta, rng.uniform(-0.3, 0.3, size=m), divergence)
    return DualFunction(spec, pi0, table, thetas[0], thetas[1:])


def test_lambda_zero_is_unconstrained_optimum():
    dual = _dual(0)
    ev = dual.evaluate(0.0)
    pi = ev.policy
    unconstrained = float(dual.d0 @ (pi.probs * dual.r1).sum(axis=1)) - dual.eta * float(
        dual.d0 @ (pi.probs * np.log(pi.probs / dual.pi0.probs)).sum(axis=1))
    assert ev.value == pytest.approx(unconstrained, abs=1e-13)
    assert ev.gradient[0] == pytest.approx(dual.constraint_means(pi.probs)[0] - dual.j_min[0])


def test_negative_lambda_rejected():
    with pytest.raises(DomainError):
        _dual(1).value(-0.1)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_and_second_derivative_finite_differences(seed):
    dual = _dual(seed)
    for lam in (0.1, 0.7, 2.0):
        h = 1e-5
        fd = (dual.value(lam + h) - dual.value(lam - h)) / (2 * h)
        g = dual.gradient(lam)[0]
        assert abs(fd - g) <= 1e-6 * max(1.0, abs(g))
        h2 = 1e-4
        fd2 = (dual.value(lam + h2) - 2 * dual.value(lam) + dual.value(lam - h2)) / h2**2
        assert abs(fd2 - dual.hessian(lam)[0, 0]) <= 1e-4 * max(1.0, abs(fd2))


def test_multi_constraint_gradient():
    dual = _dual(7, m=2)
    lam = np.array([0.4, 1.1])
    h = 1e-6
    fd = [(dual.value(lam + h * e) - dual.value(lam - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(fd, dual.gradient(lam), atol=1e-7)
    H = dual.hessian(lam)
    assert np.allclose(H, H.T) and np.linalg.eigvalsh(H).min() >= -1e-12


@pytest.mark.parametrize("div", [Divergence("chi2"), Divergence("alpha", 0.5), Divergence("alpha", 3.0)])
def test_f_divergence_gradient_envelope(div):
    dual = _dual(3, divergence=div)
    h = 1e-6
    for lam in (0.2, 1.0):
        fd = (dual.value(lam + h) - dual.value(lam - h)) / (2 * h)
        assert fd == pytest.approx(dual.gradient(lam)[0], abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(0, 5), b=st.floats(0, 5), t=st.floats(0.01, 0.99))
def test_dual_convex(seed, a, b, t):
    dual = _dual(seed % 50)
    lhs = dual.value(t * a + (1 - t) * b)
    assert lhs <= t * dual.value(a) + (1 - t) * dual.value(b) + 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(0, 5))
def test_weak_duality(seed, lam):
    dual = _dual(seed % 50)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        pi = random_policy(rng, 4, 5, 1e-3)
        slack = dual.constraint_means(pi.probs) - dual.j_min
        if np.all(slack >= 0):
            val = float(dual.d0 @ (pi.probs * dual.r1).sum(axis=1)) - dual.eta * float(
                dual.d0 @ (pi.probs * np.log(pi.probs / dual.pi0.probs)).sum(axis=1))
            assert dual.value(lam) >= val - 1e-12


def test_lipschitz_constant_examples():
    assert lipschitz_constant(1.0, 1.0) == 1.0
    assert lipschitz_constant(2.0, 0.5) == 8.0


def test_sampled_lipschitz_audit():
    dual = _dual(11, eta=0.1)
    B = np.abs(dual.rc).max()
    L = lipschitz_constant(B, dual.eta)
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.uniform(0, 10, 2)
        if a != b:
            ratio = abs(dual.gradient(a)[0] - dual.gradient(b)[0]) / abs(a - b)
            assert ratio <= L + 1e-9


def test_modulus_examples():
    table = FeatureTable(np.array([[[1.0, 0.0], [-1.0, 0.0]]]))
    pi0 = Policy.uniform(1, 2)
    spec = ProblemSpec(1.0, [0.0])
    # r2 = +-1, theta1 orthogonal: variance at lambda = 0 is 1
    m = strong_convexity_modulus(spec, pi0, table, [0.0, 1.0], [[1.0, 0.0]], 1e-3, 16)
    assert m == pytest.approx(1.0, abs=1e-5)
    const = FeatureTable(np.array([[[0.5, 0.0], [0.5, 0.1]]]))
    assert strong_convexity_modulus(spec, pi0, const, [0.0, 1.0], [[1.0, 0.0]], 2.0) == 0.0
    with pytest.raises(DomainError):
        strong_convexity_modulus(spec, pi0, table, [0.0, 1.0], [[1.0, 0.0]], 1.0, grid_size=1)


def test_modulus_nonincreasing_on_nested_grids():
    dual = _dual(5)
    rng = np.random.default_rng(5)
    t1, t2 = random_theta(rng, 3), random_theta(rng, 3)
    m1 = strong_convexity_modulus(dual.spec, dual.pi0, dual.table, t1, [t2], 1.0, 17)
    m2 = strong_convexity_modulus(dual.spec, dual.pi0, dual.table, t1, [t2], 2.0, 33)
    m4 = strong_convexity_modulus(dual.spec, dual.pi0, dual.table, t1, [t2], 4.0, 65)
    # each grid contains the previous one
    assert m1 >= m2 >= m4 > 0


def test_eval_dual_bundle():
    dual = _dual(2)
    ev = eval_dual(dual.spec, dual.pi0, dual.table, np.zeros(3), np.zeros((1, 3)), 0.5)
    assert ev.gradient.shape == (1,) and ev.second_derivative == 0.0
