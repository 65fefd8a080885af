import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biasedamp.denoise import (DenoiseResult, _l1_homotopy, DenoiserSpec, average_jacobian, denoise_l1, denoise_l2, denoise_rows,
                               l1_rows, l2_rows)
from biasedamp.errors import ConditioningError, ParameterError
from oracles import central_jacobian, l1_enumerate, l1_kkt_violation, l2_numeric, row_objective


def random_pd(rng, d, lo=0.2, hi=3.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def test_zero_input():
    F = np.eye(3)
    assert not denoise_l2(np.zeros(3), 1.0, F, 0.5).a_hat.any()
    res = denoise_l1(np.zeros(3), 1.0, F, 0.5)
    assert not res.a_hat.any() and not res.jacobian.any()


def test_l2_hand_example():
    # (F + I)^-1 = I/2
    res = denoise_l2(np.array([2.0, 2.0]), 1.0, np.eye(2), 1.0)
    np.testing.assert_allclose(res.a_hat, [1.0, 1.0], rtol=1e-15)
    np.testing.assert_allclose(res.jacobian, np.eye(2) / 2, rtol=1e-15)


def test_l1_soft_threshold_hand_example():
    res = denoise_l1(np.array([3.0, 0.5]), 1.0, np.eye(2), 1.0)
    np.testing.assert_allclose(res.a_hat, [2.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(res.jacobian, np.diag([1.0, 0.0]))


def test_l2_matches_numeric_minimizer():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = 10
        F = random_pd(rng, d)
        p = rng.normal(size=d) * 3
        lam, r = rng.uniform(0.01, 2), rng.uniform(0.2, 5)
        a = denoise_l2(p, r, F, lam).a_hat
        assert np.max(np.abs(a - l2_numeric(p, F, lam, r))) < 1e-8


def test_l2_rows_batch_equals_single():
    rng = np.random.default_rng(1)
    F = random_pd(rng, 4)
    P = rng.normal(size=(20, 4))
    r = rng.uniform(0.5, 3, 20)
    A, J = l2_rows(P, r, F, 0.3)
    singles = [denoise_l2(P[i], r[i], F, 0.3) for i in range(20)]
    np.testing.assert_allclose(A, [s.a_hat for s in singles], rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(J, average_jacobian(singles, 20), rtol=1e-10)


def test_l2_mixed_rate_mean_jacobian():
    # 1/2 [(I + I)^-1 + (I + I/4)^-1] = 1/2 (1/2 + 4/5) I
    _, J = l2_rows(np.zeros((4, 3)), np.array([1.0, 4.0, 1.0, 4.0]), np.eye(3), 1.0)
    np.testing.assert_allclose(J, 0.65 * np.eye(3), rtol=1e-14)


def test_average_jacobian():
    res = [DenoiseResult(np.zeros(2), np.eye(2)) for _ in range(5)]
    np.testing.assert_array_equal(average_jacobian(res, 5), np.eye(2))
    with pytest.raises(ParameterError):
        average_jacobian([], 1)


def test_l2_rejects_singular():
    with pytest.raises(ConditioningError):
        denoise_l2(np.ones(2), 1.0, np.diag([1.0, -1.0]), 0.0)
    with pytest.raises(ConditioningError):
        l2_rows(np.ones((3, 2)), np.ones(3), np.diag([1.0, 0.0]), 0.0)


def test_l2_rows_allows_indefinite_stationary_point():
    F = np.diag([1.0, -0.05])
    A, J = l2_rows(np.ones((2, 2)), np.ones(2), F, 0.5)
    # stationary point of the row objective: (F + lam I) a = p
    np.testing.assert_allclose(A[0], [1 / 1.5, 1 / 0.45])
    np.testing.assert_allclose(J, np.diag([1 / 1.5, 1 / 0.45]))


def test_l1_kkt_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        d = 10
        F = random_pd(rng, d, 0.05, 4.0)
        p = rng.normal(size=d) * 2
        lam, r = rng.uniform(0.1, 2), rng.uniform(0.2, 5)
        a = denoise_l1(p, r, F, lam).a_hat
        assert l1_kkt_violation(a, p, F, lam / np.sqrt(r)) < 1e-6


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_l1_matches_enumeration(d):
    rng = np.random.default_rng(10 + d)
    for _ in range(50):
        F = random_pd(rng, d, 0.1, 3.0)
        p = rng.normal(size=d) * 2
        lam, r = rng.uniform(0.1, 2), rng.uniform(0.2, 5)
        a = denoise_l1(p, r, F, lam).a_hat
        ref = l1_enumerate(p, F, lam / np.sqrt(r))
        np.testing.assert_array_equal(a != 0, ref != 0)
        assert np.max(np.abs(a - ref)) < 1e-8


def test_l1_objective_matches_long_coordinate_descent():
    from scipy.optimize import minimize

    rng = np.random.default_rng(3)
    for _ in range(20):
        d = 10
        F = random_pd(rng, d)
        p = rng.normal(size=d) * 2
        t = 0.7
        a = denoise_l1(p, 1.0, F, t).a_hat
        # independent smooth reformulation a = x+ - x-, x >= 0
        fun = lambda x: row_objective(x[:d] - x[d:], p, F, 0, "l2") + t * x.sum()  # noqa: E731
        jac = lambda x: np.concatenate([F @ (x[:d] - x[d:]) - p + t, -(F @ (x[:d] - x[d:]) - p) + t])  # noqa: E731
        res = minimize(fun, np.zeros(2 * d), jac=jac, method="L-BFGS-B", bounds=[(0, None)] * (2 * d),
                       options=dict(ftol=1e-15, gtol=1e-12, maxiter=100_000))
        assert row_objective(a, p, F, t, "l1") <= res.fun + 1e-6
        assert abs(row_objective(a, p, F, t, "l1") - res.fun) < 1e-6


def test_l1_rows_handles_indefinite_f():
    F = np.array([[1.0, 0.0], [0.0, -0.02]])
    P = np.array([[2.0, 0.5], [0.1, 0.05], [-3.0, -1.0]])
    A, _ = l1_rows(P, np.ones(3), F, 0.1)
    for a, p in zip(A, P):
        g = p - F @ a
        on = a != 0
        assert np.all(np.abs(g[on] - 0.1 * np.sign(a[on])) < 1e-10)
        assert np.all(np.abs(g[~on]) <= 0.1 + 1e-10)


def test_l2_jacobian_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = 6
        F = random_pd(rng, d)
        p = rng.normal(size=d)
        lam, r = rng.uniform(0.01, 2), rng.uniform(0.2, 5)
        J = denoise_l2(p, r, F, lam).jacobian
        fd = central_jacobian(lambda q: denoise_l2(q, r, F, lam).a_hat, p, h=1e-5)
        assert np.max(np.abs(J - fd)) < 1e-4


def test_l1_jacobian_finite_differences():
    rng = np.random.default_rng(5)
    tested = 0
    while tested < 100:
        d = 6
        F = random_pd(rng, d)
        p = rng.normal(size=d) * 2
        lam, r = rng.uniform(0.1, 1), rng.uniform(0.5, 2)
        t = lam / np.sqrt(r)
        res = denoise_l1(p, r, F, lam)
        a = res.a_hat
        g = p - F @ a
        # keep instances whose support is stable under a 1e-5 perturbation
        margin = np.where(a != 0, np.abs(a), t - np.abs(g))
        if margin.min() < 1e-3:
            continue
        fd = central_jacobian(lambda q: denoise_l1(q, r, F, lam).a_hat, p, h=1e-5)
        assert np.max(np.abs(res.jacobian - fd)) < 1e-4
        tested += 1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 10), st.floats(0.1, 10), st.integers(0, 10**6))
def test_scaling_coherence(d, lam, r, seed):
    rng = np.random.default_rng(seed)
    F = random_pd(rng, d)
    p = rng.normal(size=d)
    a = denoise_l2(p, r, F, lam).a_hat
    np.testing.assert_allclose(denoise_l2(p, 2 * r, F, 2 * lam).a_hat, a, rtol=1e-12, atol=1e-14)
    b = denoise_l1(p, r, F, lam).a_hat
    np.testing.assert_allclose(denoise_l1(p, 4 * r, F, 2 * lam).a_hat, b, rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6))
def test_l2_shrinks_relative_to_unregularized(d, seed):
    rng = np.random.default_rng(seed)
    F = random_pd(rng, d)
    p = rng.normal(size=d)
    a0 = denoise_l2(p, 1.0, F, 0.0).a_hat
    a1 = denoise_l2(p, 1.0, F, 1.0).a_hat
    # a0 minimizes the unpenalized objective; the penalty shrinks the norm
    assert row_objective(a1, p, F, 0.0, "l2") >= row_objective(a0, p, F, 0.0, "l2") - 1e-12
    assert a1 @ a1 <= a0 @ a0 + 1e-12


def test_denoise_rows_dispatch_and_spec():
    assert DenoiserSpec("squared_norm").kind == "l2"
    with pytest.raises(ParameterError):
        DenoiserSpec("huber")
    with pytest.raises(ParameterError):
        DenoiserSpec("l1", lambda_u=-1.0)
    P = np.array([[3.0, 0.5]])
    A, _ = denoise_rows(P, np.ones(1), np.eye(2), 1.0, "l1")
    np.testing.assert_allclose(A, [[2.0, 0.0]])



def test_l1_ill_conditioned_matches_enumeration():
    # condition numbers up to 1e8 with thresholds down to 1e-6
    rng = np.random.default_rng(21)
    for _ in range(200):
        d = int(rng.integers(2, 5))
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        F = (Q * 10 ** rng.uniform(-7, 1, d)) @ Q.T
        F = (F + F.T) / 2
        p = rng.normal(size=d)
        t = 10 ** rng.uniform(-6, 0)
        ref = l1_enumerate(p, F, t)
        for a in (denoise_l1(p, 1.0, F, t).a_hat, _l1_homotopy(p, t, F)):
            assert l1_kkt_violation(a, p, F, t) < 1e-6
            assert row_objective(a, p, F, t, "l1") <= row_objective(ref, p, F, t, "l1") + 1e-9 * abs(
                row_objective(ref, p, F, t, "l1"))
