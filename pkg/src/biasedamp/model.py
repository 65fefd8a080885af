"""Ground-truth embeddings, bias priors and the two observation channels.

Counts follow Z_ij ~ Poisson(lambda0 * exp(u_i.v_j / sqrt(m) + s_u[i] + s_v[j])).
Models are kept in the normalized form lambda0 = 1, mean(r_u) = 1.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .blas import matmul
from .errors import ChannelError, DomainError, ParameterError

EXPONENT_GUARD = 700.0


@dataclass(frozen=True)
class BiasPrior:
    """Distribution of one side's log-frequency biases.

    kind "exponential": s = shift + Exp(mean=scale).
    kind "zipf": r_i = c0 / i**alpha (s = log r), rows ordered by frequency.
    kind "constant": s = value for every row.
    """

    kind: str = "exponential"
    scale: float = 0.25
    shift: float = 5.0
    alpha: float = 1.0
    c0: float = 1.0
    value: float = 0.0

    def validate(self):
        if self.kind == "exponential":
            if not self.scale >= 0:
                raise ParameterError(f"exponential scale must be nonnegative, got {self.scale}")
            if self.scale >= 1:
                raise ParameterError("exponential scale >= 1 gives E[exp(s)] = inf")
        elif self.kind == "zipf":
            if not self.alpha >= 0:
                raise ParameterError(f"zipf alpha must be nonnegative, got {self.alpha}")
            if not self.c0 > 0:
                raise ParameterError(f"zipf c0 must be positive, got {self.c0}")
        elif self.kind == "constant":
            if not np.isfinite(self.value):
                raise ParameterError("constant bias must be finite")
        else:
            raise ParameterError(f"unknown bias prior kind {self.kind!r}")

    def sample_log(self, size, rng):
        if self.kind == "exponential":
            return rng.exponential(self.scale, size) + self.shift
        if self.kind == "zipf":
            return np.log(zipf_rates(size, self.alpha, self.c0))
        return np.full(size, float(self.value))

    def mean_rate(self, size=None):
        """E[exp(s)]; finite-size mean for Zipf since its limit may diverge."""
        if self.kind == "exponential":
            return np.exp(self.shift) / (1.0 - self.scale)
        if self.kind == "zipf":
            return zipf_rates(size, self.alpha, self.c0).mean()
        return np.exp(self.value)


@dataclass(frozen=True)
class PriorSpec:
    """Row prior N(0, sigma2 I) with round(sparsity*d) coordinates zeroed per row.

    ``center`` removes the r-weighted mean of each embedding coordinate after
    sampling (over the nonzero support, so sparsity is kept). Row and column
    sums cannot tell such a component apart from the biases, so without it
    the bias step silently projects it out of the truth.
    """

    sigma2: float = 0.1
    sparsity: float = 0.0
    bias_u: BiasPrior = field(default_factory=BiasPrior)
    bias_v: BiasPrior = field(default_factory=BiasPrior)
    center: bool = True

    def validate(self):
        if not self.sigma2 > 0:
            raise ParameterError(f"embedding variance must be positive, got {self.sigma2}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ParameterError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        self.bias_u.validate()
        self.bias_v.validate()


@dataclass(frozen=True)
class GroundTruthModel:
    U: np.ndarray
    V: np.ndarray
    s_u: np.ndarray
    s_v: np.ndarray
    lambda0: float = 1.0
    seed: object = None

    def __post_init__(self):
        m, d = self.U.shape
        n, d2 = self.V.shape
        if d2 != d or d < 1 or m < d or n < d:
            raise ParameterError(f"bad embedding shapes {self.U.shape}, {self.V.shape}")
        if self.s_u.shape != (m,) or self.s_v.shape != (n,):
            raise ParameterError("bias vectors do not match embedding rows")
        if not (np.all(np.isfinite(self.s_u)) and np.all(np.isfinite(self.s_v))):
            raise ParameterError("biases must be finite")
        if not self.lambda0 >= 0:
            raise ParameterError("lambda0 must be nonnegative")

    @property
    def m(self):
        return self.U.shape[0]

    @property
    def n(self):
        return self.V.shape[0]

    @property
    def d(self):
        return self.U.shape[1]

    @property
    def beta(self):
        return self.m / self.n

    @property
    def r_u(self):
        return np.exp(self.s_u)

    @property
    def r_v(self):
        return np.exp(self.s_v)

    @property
    def A(self):
        """Scaled embeddings diag(sqrt(r_u)) U."""
        return np.sqrt(self.r_u)[:, None] * self.U

    @property
    def B(self):
        return np.sqrt(self.r_v)[:, None] * self.V


def zipf_rates(size, alpha, c0=1.0):
    return c0 / np.arange(1, size + 1, dtype=float) ** alpha


def normalize(model):
    """Fold lambda0 and the mean of r_u into s_v so that lambda0 = 1, mean(r_u) = 1."""
    if not model.lambda0 > 0:
        raise ParameterError("cannot normalize a model with lambda0 = 0")
    log_c = np.log(np.mean(np.exp(model.s_u)))
    return replace(model, s_u=model.s_u - log_c, s_v=model.s_v + log_c + np.log(model.lambda0), lambda0=1.0)


def center_embeddings(X, r):
    """Subtract the r-weighted mean of each column, computed over its nonzero support."""
    X = X.copy()
    support = X != 0
    w = np.where(support, r[:, None], 0.0)
    tot = w.sum(axis=0)
    shift = np.divide((w * X).sum(axis=0), tot, out=np.zeros(X.shape[1]), where=tot > 0)
    X -= np.where(support, shift, 0.0)
    return X


def sample_embedding_rows(rng, rows, d, prior):
    X = rng.normal(0.0, np.sqrt(prior.sigma2), (rows, d))
    k = int(round(prior.sparsity * d))
    if k > 0:
        drop = np.argsort(rng.random((rows, d)), axis=1)[:, :k]
        np.put_along_axis(X, drop, 0.0, axis=1)
    return X


def generate_ground_truth(prior, m, n, d, seed):
    if not (isinstance(d, (int, np.integer)) and d >= 1 and m >= d and n >= d):
        raise ParameterError(f"need 1 <= d <= min(m, n), got m={m}, n={n}, d={d}")
    prior.validate()
    rng = np.random.default_rng(seed)
    U = sample_embedding_rows(rng, m, d, prior)
    V = sample_embedding_rows(rng, n, d, prior)
    s_u = prior.bias_u.sample_log(m, rng)
    s_v = prior.bias_v.sample_log(n, rng)
    model = normalize(GroundTruthModel(U, V, s_u, s_v, 1.0, seed))
    if prior.center:
        model = replace(model, U=center_embeddings(model.U, model.r_u), V=center_embeddings(model.V, model.r_v))
    return model


def _exponents(model, rows):
    with np.errstate(divide="ignore"):
        log_l0 = np.log(model.lambda0)
    E = matmul(model.U[rows], model.V.T) / np.sqrt(model.m)
    E += model.s_u[rows, None]
    E += model.s_v[None, :]
    E += log_l0
    return E


def _guard(E, rows):
    bad = E > EXPONENT_GUARD
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ChannelError(int(rows[i]), int(j), float(E[i, j]))


def poisson_lambda(model, i, j):
    if not (0 <= i < model.m and 0 <= j < model.n):
        raise DomainError(f"index ({i}, {j}) out of range")
    with np.errstate(divide="ignore"):
        e = model.U[i] @ model.V[j] / np.sqrt(model.m) + model.s_u[i] + model.s_v[j] + np.log(model.lambda0)
    if e > EXPONENT_GUARD:
        raise ChannelError(i, j, float(e))
    return float(np.exp(e))


def lambda_matrix(model, rows=None):
    rows = np.arange(model.m) if rows is None else np.asarray(rows)
    E = _exponents(model, rows)
    _guard(E, rows)
    return np.exp(E)


@dataclass(frozen=True)
class CountMatrix:
    Z: sp.csr_matrix

    def __post_init__(self):
        Z = sp.csr_matrix(self.Z)
        if Z.nnz and not np.issubdtype(Z.dtype, np.integer):
            if np.any(Z.data != np.round(Z.data)):
                raise DomainError("counts must be integers")
        Z = Z.astype(np.int64)
        if Z.nnz and Z.data.min() < 0:
            raise DomainError("counts must be nonnegative")
        Z.eliminate_zeros()
        object.__setattr__(self, "Z", Z)

    @property
    def shape(self):
        return self.Z.shape

    @property
    def z_tot(self):
        return int(self.Z.data.sum(dtype=np.int64))

    def toarray(self):
        return self.Z.toarray()


def sample_counts(model, seed, block=256):
    """Independent Poisson counts, one SeedSequence child stream per row."""
    streams = np.random.SeedSequence(seed).spawn(model.m)
    indptr, indices, data = [0], [], []
    for start in range(0, model.m, block):
        rows = np.arange(start, min(start + block, model.m))
        E = _exponents(model, rows)
        _guard(E, rows)
        lam = np.exp(E)
        for k, i in enumerate(rows):
            z = np.random.default_rng(streams[i]).poisson(lam[k])
            nz = np.flatnonzero(z)
            indices.append(nz)
            data.append(z[nz])
            indptr.append(indptr[-1] + nz.size)
    Z = sp.csr_matrix(
        (np.concatenate(data).astype(np.int64), np.concatenate(indices), np.array(indptr)),
        shape=(model.m, model.n),
    )
    return CountMatrix(Z)


def sample_gaussian_surrogate(model, seed):
    """Y~ = A B^T / sqrt(m) + W with W i.i.d. N(0, 1), built with the true biases."""
    from .bias import BiasEstimate
    from .scorechannel import ScaledObservation

    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((model.m, model.n))
    Y += matmul(model.A, model.B.T) / np.sqrt(model.m)
    bias = BiasEstimate.from_rates(model.r_u * model.lambda0, model.r_v)
    return ScaledObservation(Y, bias)
