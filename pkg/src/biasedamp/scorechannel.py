"""Fisher-score rescaling of counts and spectral diagnostics.

Y~_ij = (Z_ij - q_ij) / sqrt(q_ij) with q_ij = rate_u[i] * rate_v[j], the
expected count under the fitted biases. Under the model Y~ is approximately
A B^T / sqrt(m) plus unit-variance noise.
"""
from dataclasses import dataclass, replace

import numpy as np

from .bias import estimate_bias
from .blas import matmul
from .errors import DomainError, ParameterError


@dataclass(frozen=True)
class ScaledObservation:
    Y_tilde: np.ndarray
    bias: object

    def __post_init__(self):
        if self.Y_tilde.shape != (self.bias.m, self.bias.n):
            raise DomainError(f"observation {self.Y_tilde.shape} does not match biases ({self.bias.m}, {self.bias.n})")

    @property
    def m(self):
        return self.Y_tilde.shape[0]

    @property
    def n(self):
        return self.Y_tilde.shape[1]

    @property
    def shape(self):
        return self.Y_tilde.shape

    def delta(self, i=None, j=None):
        return self.bias.delta(i, j)


def _check(counts, bias):
    if counts.shape != (bias.m, bias.n):
        raise DomainError(f"counts {counts.shape} vs biases ({bias.m}, {bias.n})")
    if np.any(bias.rate_u <= 0) or np.any(bias.rate_v <= 0):
        raise DomainError("bias estimates must be strictly positive")


def build_scaled_observation(counts, bias, block=512):
    _check(counts, bias)
    ru, rv = bias.rate_u, bias.rate_v
    m, n = counts.shape
    Y = np.empty((m, n))
    for s in range(0, m, block):
        e = min(s + block, m)
        q = np.outer(ru[s:e], rv)
        Y[s:e] = counts.Z[s:e].toarray()
        Y[s:e] -= q
        Y[s:e] /= np.sqrt(q)
    return ScaledObservation(Y, bias)


def fisher_score(counts, bias):
    """Unscaled score Y_ij = (Z_ij - q_ij) / q_ij."""
    _check(counts, bias)
    q = np.outer(bias.rate_u, bias.rate_v)
    return (counts.toarray() - q) / q


def _check_psd(S, name):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DomainError(f"{name} must be square")
    scale = max(np.abs(S).max(), 1e-300)
    if np.abs(S - S.T).max() > 1e-10 * scale:
        raise DomainError(f"{name} is not symmetric")
    w, Q = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -1e-10 * scale:
        raise DomainError(f"{name} is indefinite (min eigenvalue {w.min():.3e})")
    return w.clip(min=0), Q


def delta_critical(sigma_u, sigma_v, beta):
    if not beta > 0:
        raise DomainError("beta must be positive")
    wu, Qu = _check_psd(sigma_u, "sigma_u")
    _check_psd(sigma_v, "sigma_v")
    # lambda_max(Su Sv) via the symmetric form Su^1/2 Sv Su^1/2
    half = (Qu * np.sqrt(wu)) @ Qu.T
    lam = np.linalg.eigvalsh(half @ np.asarray(sigma_v, dtype=float) @ half).max()
    return float(lam / (1.0 + np.sqrt(beta)) ** 2)


def top_singular_values(X, k, tol=1e-8, max_iter=1000, oversample=10, seed=0):
    """Block power (subspace) iteration with Rayleigh-Ritz extraction.

    Returns (values, converged, iterations) for the k largest singular values.
    """
    m, n = X.shape
    p = min(k + oversample, m, n)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(matmul(X.T, rng.standard_normal((m, p))))
    prev = None
    for it in range(1, max_iter + 1):
        W, _ = np.linalg.qr(matmul(X, Q))
        Q, R = np.linalg.qr(matmul(X.T, W))
        s = np.linalg.svd(R, compute_uv=False)[:k]
        if prev is not None and np.max(np.abs(s - prev) / np.maximum(s, 1e-300)) < tol:
            return s, True, it
        prev = s
    return s, False, max_iter


@dataclass(frozen=True)
class SpectralReport:
    """Top d+1 singular values of Y~ / sqrt(n); the pure-noise bulk edge is 1 + sqrt(beta)."""

    sigmas: np.ndarray
    beta: float
    delta_critical: float
    delta: float = float("nan")
    u: float = float("nan")
    v: float = float("nan")
    converged: bool = True
    normalization: str = "sqrt_n"

    @property
    def bulk_edge(self):
        return 1.0 + np.sqrt(self.beta)

    @property
    def sigma1(self):
        return float(self.sigmas[0])

    @property
    def sigma_d(self):
        return float(self.sigmas[-2])

    @property
    def sigma_d1(self):
        return float(self.sigmas[-1])

    def row(self):
        return dict(u=self.u, v=self.v, delta=self.delta, sigma1=self.sigma1, sigma_d=self.sigma_d,
                    sigma_d1=self.sigma_d1, bulk_edge=self.bulk_edge, delta_critical=self.delta_critical)


def spectral_report(Y, d, sigma_u, sigma_v, seed=0, **extra):
    m, n = Y.shape
    s, ok, _ = top_singular_values(Y / np.sqrt(n), d + 1, seed=seed)
    return SpectralReport(s, m / n, delta_critical(sigma_u, sigma_v, m / n), converged=ok, **extra)


def prior_covariance(prior, d):
    kept = 1.0 - round(prior.sparsity * d) / d
    return prior.sigma2 * kept * np.eye(d)


def singular_sweep(prior, m, n, d, grid, seed):
    """Constant biases s_u = u, s_v = v at each grid point; Delta = exp(-(u + v))."""
    from .model import BiasPrior, generate_ground_truth, sample_counts

    grid = [(float(u), float(v)) for u, v in grid]
    if not all(np.isfinite(g).all() for g in grid):
        raise ParameterError("grid must be finite")
    cov = prior_covariance(prior, d)
    children = np.random.SeedSequence(seed).spawn(len(grid))
    reports = []
    for (u, v), child in zip(grid, children):
        pri = replace(prior, bias_u=BiasPrior("constant", value=u), bias_v=BiasPrior("constant", value=v))
        s_model, s_counts, s_svd = child.generate_state(3)
        model = generate_ground_truth(pri, m, n, d, int(s_model))
        counts = sample_counts(model, int(s_counts))
        obs = build_scaled_observation(counts, estimate_bias(counts))
        reports.append(spectral_report(obs.Y_tilde, d, cov, cov, seed=int(s_svd), u=u, v=v, delta=float(np.exp(-(u + v)))))
    return reports
