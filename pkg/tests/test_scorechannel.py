import numpy as np
import pytest
import scipy.sparse as sp

from biasedamp.bias import BiasEstimate, estimate_bias
from biasedamp.errors import DomainError
from biasedamp.model import BiasPrior, CountMatrix, GroundTruthModel, PriorSpec, sample_counts
from biasedamp.scorechannel import (build_scaled_observation, delta_critical, fisher_score, singular_sweep,
                                    spectral_report, top_singular_values)


def _counts(Z):
    return CountMatrix(sp.csr_matrix(np.asarray(Z, dtype=np.int64)))


def _rates(ru, rv):
    """Estimate whose effective rates are exactly ru and rv."""
    ru, rv = np.asarray(ru, float), np.asarray(rv, float)
    return BiasEstimate(ru, rv, float("nan"), 1.0)


def test_hand_scores():
    obs = build_scaled_observation(_counts([[0, 6]]), _rates([1.0], [1.0, 4.0]))
    # (0 - 1)/1 and (6 - 4)/2
    np.testing.assert_allclose(obs.Y_tilde, [[-1.0, 1.0]])
    np.testing.assert_allclose(fisher_score(_counts([[0, 6]]), _rates([1.0], [1.0, 4.0])), [[-1.0, 0.5]])


def test_score_matches_loop():
    rng = np.random.default_rng(0)
    Z = rng.poisson(5.0, (7, 9))
    est = estimate_bias(_counts(Z))
    obs = build_scaled_observation(_counts(Z), est, block=3)
    for i in range(7):
        for j in range(9):
            q = est.rate_u[i] * est.rate_v[j]
            assert abs(obs.Y_tilde[i, j] - (Z[i, j] - q) / np.sqrt(q)) < 1e-12


def test_score_at_mean_is_zero():
    ru, rv = np.array([1.0, 2.0]), np.array([3.0, 1.0, 2.0])
    Z = np.outer(ru, rv)
    obs = build_scaled_observation(_counts(Z), _rates(ru, rv))
    assert not obs.Y_tilde.any()


def test_shape_and_domain_errors():
    with pytest.raises(DomainError):
        build_scaled_observation(_counts([[1, 2]]), _rates([1.0], [1.0]))
    with pytest.raises(DomainError):
        build_scaled_observation(_counts([[1]]), _rates([0.0], [1.0]))


@pytest.mark.parametrize("su, sv, beta, expect", [
    (0.1 * np.eye(10), 0.1 * np.eye(10), 2 / 3, 0.01 / (1 + np.sqrt(2 / 3)) ** 2),
    (np.eye(3), np.eye(3), 1.0, 0.25),
    (np.diag([2.0, 1.0]), np.diag([1.0, 3.0]), 1.0, 0.75),
])
def test_delta_critical(su, sv, beta, expect):
    assert abs(delta_critical(su, sv, beta) - expect) < 1e-14
    if beta == 2 / 3:
        assert abs(expect - 3.03e-3) < 5e-6


def test_delta_critical_nondiagonal():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    su, sv = X @ X.T, Y @ Y.T
    lam = np.max(np.linalg.eigvals(su @ sv).real)
    assert abs(delta_critical(su, sv, 0.5) - lam / (1 + np.sqrt(0.5)) ** 2) < 1e-10 * lam


@pytest.mark.parametrize("su", [np.array([[1.0, 2.0], [0.0, 1.0]]), np.diag([1.0, -1.0]), np.ones(3)])
def test_delta_critical_rejects(su):
    with pytest.raises(DomainError):
        delta_critical(su, np.eye(2), 1.0)


def test_top_singular_values_match_svd():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 80)) + 5 * np.outer(rng.normal(size=120), rng.normal(size=80)) / 10
    s, ok, _ = top_singular_values(X, 4, tol=1e-12)
    assert ok
    np.testing.assert_allclose(s, np.linalg.svd(X, compute_uv=False)[:4], rtol=1e-8)


def test_pure_noise_bulk_edge():
    m, n, d = 1000, 2000, 10
    zero = GroundTruthModel(np.zeros((m, d)), np.zeros((n, d)), np.zeros(m), np.full(n, 3.0))
    counts = sample_counts(zero, 0)
    obs = build_scaled_observation(counts, estimate_bias(counts))
    rep = spectral_report(obs.Y_tilde, d, 0.1 * np.eye(d), 0.1 * np.eye(d))
    assert rep.bulk_edge == 1 + np.sqrt(0.5)
    assert abs(rep.sigma1 / rep.bulk_edge - 1) < 0.05


def test_sweep_separation_moves_with_delta():
    pri = PriorSpec(center=True)
    reps = singular_sweep(pri, 400, 800, 3, [(4.0, 4.0), (-1.0, -1.0)], seed=0)
    strong, weak = reps
    assert strong.delta < strong.delta_critical < weak.delta
    assert strong.sigma_d / strong.sigma_d1 > weak.sigma_d / weak.sigma_d1
    assert abs(weak.delta - np.exp(2.0)) < 1e-12


def test_constant_prior_used_by_sweep():
    # the sweep must not depend on the exponential bias settings of the prior
    a = singular_sweep(PriorSpec(), 60, 80, 2, [(2.0, 2.0)], seed=3)[0]
    b = singular_sweep(PriorSpec(bias_u=BiasPrior(shift=9.0)), 60, 80, 2, [(2.0, 2.0)], seed=3)[0]
    np.testing.assert_array_equal(a.sigmas, b.sigmas)
