"""Loss and error measures shared by AMP runs, baselines and SE predictions."""
from dataclasses import dataclass, field

import numpy as np

from .blas import matmul
from .denoise import penalty
from .errors import DomainError, UndefinedMetricError


@dataclass
class EvalRecord:
    k: int
    loss: float
    loss_normalized: float = float("nan")
    mse_M: float = float("nan")
    overlap_a: float = float("nan")
    overlap_b: float = float("nan")
    bins: dict = field(default_factory=dict)


def residual_norm2(Y, A, B, block=1024):
    """||Y - A B^T / sqrt(m)||_F^2 accumulated over row blocks."""
    m = Y.shape[0]
    s = np.sqrt(m)
    tot = 0.0
    for i in range(0, m, block):
        R = Y[i:i + block] - matmul(A[i:i + block], B.T) / s
        tot += float(np.einsum("ij,ij->", R, R))
    return tot


def quadratic_loss(A, B, obs, denoiser):
    if A.shape[0] != obs.m or B.shape[0] != obs.n or A.shape[1] != B.shape[1]:
        raise DomainError(f"factor shapes {A.shape}, {B.shape} do not fit observation {obs.shape}")
    b = obs.bias
    return (0.5 * residual_norm2(obs.Y_tilde, A, B)
            + penalty(A, b.rate_u, denoiser.lambda_u, denoiser.kind)
            + penalty(B, b.rate_v, denoiser.lambda_v, denoiser.kind))


def gram_m_mse(sig_a, sig_b, m_a, m_b, q_a, q_b):
    """Normalized M-MSE from m-normalized d x d moments:
    [tr(Sa Sb) - 2 tr(Ma Mb^T) + tr(Qa Qb)] / tr(Sa Sb)."""
    denom = np.trace(sig_a @ sig_b)
    if not denom > 0:
        raise UndefinedMetricError("true correlation matrix is zero")
    return float((denom - 2 * np.trace(m_a @ m_b.T) + np.trace(q_a @ q_b)) / denom)


def normalized_m_mse(A, B, A_hat, B_hat):
    if A.shape != A_hat.shape or B.shape != B_hat.shape:
        raise DomainError("truth and estimate shapes differ")
    return gram_m_mse(A.T @ A, B.T @ B, A.T @ A_hat, B.T @ B_hat, A_hat.T @ A_hat, B_hat.T @ B_hat)


def overlap(A, A_hat):
    if A.shape != A_hat.shape:
        raise DomainError("shapes differ")
    return float(np.mean(np.abs(np.einsum("ij,ij->i", A, A_hat))))


def decile_edges(x, nbins=10):
    return np.quantile(np.asarray(x, dtype=float).ravel(), np.linspace(0, 1, nbins + 1))


def _bin_index(x, edges):
    return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)


def conditional_row_mse(A, A_hat, r, edges=None):
    """Mean of |a_i - a_hat_i|^2 within bins of the row frequency r (NaN for empty bins)."""
    edges = decile_edges(r) if edges is None else np.asarray(edges)
    idx = _bin_index(r, edges)
    err = np.sum((A - A_hat) ** 2, axis=1)
    nb = len(edges) - 1
    cnt = np.bincount(idx, minlength=nb)
    tot = np.bincount(idx, weights=err, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        return edges, np.where(cnt > 0, tot / cnt, np.nan)


def binned_m_mse(U, V, U_hat, V_hat, delta_u, delta_v, edges=None, block=512):
    """Normalized error of M_ij = u_i.v_j within bins of Delta_ij = delta_u[i] * delta_v[j].

    Works in unscaled embeddings; returns (edges, per-bin MSE, per-bin entry count).
    """
    m = U.shape[0]
    if edges is None:
        edges = decile_edges(np.outer(delta_u, delta_v))
    nb = len(edges) - 1
    err = np.zeros(nb)
    sig = np.zeros(nb)
    cnt = np.zeros(nb, dtype=np.int64)
    for i in range(0, m, block):
        sl = slice(i, i + block)
        M = U[sl] @ V.T
        Mh = U_hat[sl] @ V_hat.T
        idx = _bin_index(np.outer(delta_u[sl], delta_v), edges).ravel()
        err += np.bincount(idx, weights=((M - Mh) ** 2).ravel(), minlength=nb)
        sig += np.bincount(idx, weights=(M**2).ravel(), minlength=nb)
        cnt += np.bincount(idx, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        return edges, np.where(sig > 0, err / sig, np.nan), cnt
