import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biasedamp.bias import BiasEstimate
from biasedamp.denoise import DenoiserSpec
from biasedamp.errors import DomainError, UndefinedMetricError
from biasedamp.metrics import (binned_m_mse, conditional_row_mse, decile_edges, normalized_m_mse, overlap,
                               quadratic_loss, residual_norm2)
from biasedamp.model import PriorSpec, generate_ground_truth, sample_gaussian_surrogate
from biasedamp.scorechannel import ScaledObservation
from oracles import loss_loop, m_mse_materialized, overlap_loop


def _obs(rng, m, n):
    ru, rv = rng.uniform(0.5, 2, m), rng.uniform(0.5, 2, n)
    return ScaledObservation(rng.normal(size=(m, n)), BiasEstimate(ru, rv, float("nan"), 1.0))


def test_loss_zero_factors():
    rng = np.random.default_rng(0)
    obs = _obs(rng, 6, 8)
    z = quadratic_loss(np.zeros((6, 2)), np.zeros((8, 2)), obs, DenoiserSpec())
    assert z == pytest.approx(0.5 * np.sum(obs.Y_tilde**2), rel=1e-12)


def test_loss_at_truth_is_noise():
    model = generate_ground_truth(PriorSpec(), 60, 90, 3, seed=1)
    obs = sample_gaussian_surrogate(model, 2)
    W = obs.Y_tilde - model.A @ model.B.T / np.sqrt(model.m)
    loss = quadratic_loss(model.A, model.B, obs, DenoiserSpec(lambda_u=0, lambda_v=0))
    assert abs(loss - 0.5 * np.sum(W**2)) < 1e-9 * loss


@pytest.mark.parametrize("kind", ["l2", "l1"])
def test_loss_matches_loop(kind):
    rng = np.random.default_rng(2)
    obs = _obs(rng, 7, 9)
    A, B = rng.normal(size=(7, 3)), rng.normal(size=(9, 3))
    den = DenoiserSpec(kind, 0.3, 0.7)
    ref = loss_loop(obs.Y_tilde, A, B, obs.bias.rate_u, obs.bias.rate_v, 0.3, 0.7, kind)
    assert abs(quadratic_loss(A, B, obs, den) - ref) < 1e-10 * abs(ref)


def test_loss_shape_error():
    rng = np.random.default_rng(3)
    with pytest.raises(DomainError):
        quadratic_loss(np.zeros((5, 2)), np.zeros((8, 2)), _obs(rng, 6, 8), DenoiserSpec())


def test_residual_blocks():
    rng = np.random.default_rng(4)
    Y, A, B = rng.normal(size=(10, 7)), rng.normal(size=(10, 2)), rng.normal(size=(7, 2))
    full = np.sum((Y - A @ B.T / np.sqrt(10)) ** 2)
    assert abs(residual_norm2(Y, A, B, block=3) - full) < 1e-12 * full


def test_mse_gram_equals_materialized():
    rng = np.random.default_rng(5)
    A, B = rng.normal(size=(40, 3)), rng.normal(size=(50, 3))
    Ah, Bh = A + 0.3 * rng.normal(size=A.shape), B + 0.3 * rng.normal(size=B.shape)
    assert abs(normalized_m_mse(A, B, Ah, Bh) - m_mse_materialized(A, B, Ah, Bh)) < 1e-12
    assert normalized_m_mse(A, B, A, B) == pytest.approx(0, abs=1e-14)
    assert normalized_m_mse(A, B, np.zeros_like(A), np.zeros_like(B)) == pytest.approx(1, abs=1e-14)


def test_mse_undefined_for_zero_truth():
    with pytest.raises(UndefinedMetricError):
        normalized_m_mse(np.zeros((3, 2)), np.zeros((4, 2)), np.ones((3, 2)), np.ones((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6))
def test_mse_rotation_and_permutation_invariance(d, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(12, d)), rng.normal(size=(15, d))
    Ah, Bh = rng.normal(size=A.shape), rng.normal(size=B.shape)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    base = normalized_m_mse(A, B, Ah, Bh)
    assert normalized_m_mse(A, B, Ah @ Q, Bh @ Q) == pytest.approx(base, rel=1e-10, abs=1e-12)
    # A G, B G^-T leaves M unchanged
    G = Q * rng.uniform(0.5, 2, d)
    assert normalized_m_mse(A, B, Ah @ G, Bh @ np.linalg.inv(G).T) == pytest.approx(base, rel=1e-9, abs=1e-12)
    pr, pc = rng.permutation(12), rng.permutation(15)
    assert normalized_m_mse(A[pr], B[pc], Ah[pr], Bh[pc]) == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_overlap():
    rng = np.random.default_rng(6)
    A, Ah = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    assert abs(overlap(A, Ah) - overlap_loop(A, Ah)) < 1e-13
    U = A / np.linalg.norm(A, axis=1, keepdims=True)
    assert overlap(U, U) == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(DomainError):
        overlap(A, Ah[:3])


def test_conditional_row_mse():
    A = np.arange(12, dtype=float).reshape(6, 2)
    r = np.array([1, 2, 3, 4, 5, 6], dtype=float)
    edges, cond = conditional_row_mse(A, A, r, edges=np.array([0.0, 3.5, 10.0, 20.0]))
    np.testing.assert_array_equal(cond[:2], 0)
    assert np.isnan(cond[2])
    _, cond = conditional_row_mse(A, np.zeros_like(A), r, edges=np.array([0.0, 3.5, 10.0]))
    np.testing.assert_allclose(cond, [np.mean(np.sum(A[:3] ** 2, 1)), np.mean(np.sum(A[3:] ** 2, 1))])


def test_perfect_and_zero_ensembles():
    model = generate_ground_truth(PriorSpec(), 4000, 10, 10, seed=7)
    U = model.U
    _, cond = conditional_row_mse(U, U, np.ones(U.shape[0]), edges=np.array([0.0, 2.0]))
    assert cond[0] == 0
    # E|u|^2 = d sigma^2 = 1 for the default prior, up to centering and sampling error
    _, cond = conditional_row_mse(U, np.zeros_like(U), np.ones(U.shape[0]), edges=np.array([0.0, 2.0]))
    assert abs(cond[0] - 1.0) < 0.05


def test_binned_mse_matches_materialized():
    rng = np.random.default_rng(8)
    U, V = rng.normal(size=(30, 2)), rng.normal(size=(40, 2))
    Uh, Vh = U + 0.5 * rng.normal(size=U.shape), V + 0.5 * rng.normal(size=V.shape)
    du, dv = rng.uniform(0.1, 1, 30), rng.uniform(0.1, 1, 40)
    edges, mse, cnt = binned_m_mse(U, V, Uh, Vh, du, dv, block=7)
    D = np.outer(du, dv)
    np.testing.assert_allclose(edges, decile_edges(D))
    M, Mh = U @ V.T, Uh @ Vh.T
    idx = np.clip(np.searchsorted(edges, D, side="right") - 1, 0, 9)
    for b in range(10):
        sel = idx == b
        assert cnt[b] == sel.sum()
        assert abs(mse[b] - np.sum((M - Mh)[sel] ** 2) / np.sum(M[sel] ** 2)) < 1e-12
    assert cnt.sum() == 1200
