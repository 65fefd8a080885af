"""Monte-Carlo state evolution for the biased low-rank AMP.

B-side moments carry the 1/beta weight so that every d x d quantity is the
limit of the corresponding m-normalized AMP matrix:
M_b = E(B^T B_hat)/beta, Q_b = E(B_hat^T B_hat)/beta, Gamma_a = E(dG_b)/beta.
The lag-one cross moments between successive estimates are tracked as well;
they are needed for the predicted training loss.
"""
from dataclasses import dataclass, field

import numpy as np

from .amp import GAMMA_NORMALIZERS
from .denoise import DenoiserSpec, denoise_rows
from .errors import ConditioningError, DivergenceError, ParameterError
from .metrics import conditional_row_mse, decile_edges, gram_m_mse


def _sym(X):
    return (X + X.T) / 2


def psd_factor(C):
    """L with L L^T = C after flooring negative eigenvalues at zero."""
    w, Q = np.linalg.eigh(_sym(C))
    if not np.all(np.isfinite(w)):
        raise ConditioningError("covariance has non-finite entries")
    return Q * np.sqrt(np.maximum(w, 0.0))


class PriorSampler:
    """Rows sqrt(R) * x with x from the embedding prior and R the normalized rates.

    Normalization matches generate_ground_truth: R_u = e^s_u / E e^s_u and
    R_v = e^s_v E e^s_u. ``size`` is the finite population size used for Zipf.
    """

    def __init__(self, prior, side, d, size_u=None, size_v=None):
        self.prior, self.side, self.d = prior, side, d
        self.size_u, self.size_v = size_u, size_v
        self.c_u = prior.bias_u.mean_rate(size_u)

    def _rates(self, rng, N):
        bp = self.prior.bias_u if self.side == "u" else self.prior.bias_v
        size = self.size_u if self.side == "u" else self.size_v
        if bp.kind == "zipf":
            from .model import zipf_rates

            r = zipf_rates(size, bp.alpha, bp.c0)[rng.integers(0, size, N)]
        else:
            r = np.exp(bp.sample_log(N, rng))
        return r / self.c_u if self.side == "u" else r * self.c_u

    def __call__(self, rng, N):
        from .model import sample_embedding_rows

        X = sample_embedding_rows(rng, N, self.d, self.prior)
        r = self._rates(rng, N)
        return np.sqrt(r)[:, None] * X, r


class EmpiricalSampler:
    """Bootstrap rows (and their rates) from a fixed matrix."""

    def __init__(self, X, r):
        self.X, self.r = np.asarray(X, dtype=float), np.asarray(r, dtype=float)

    def __call__(self, rng, N):
        idx = rng.integers(0, self.X.shape[0], N)
        return self.X[idx], self.r[idx]


@dataclass
class SeConfig:
    """``init_M0``/``init_Q0`` are the m-normalized moments (1/m) B^T B_0 and
    (1/m) B_0^T B_0 of the AMP initialization; by default B_0 is independent
    of B with i.i.d. N(0, init_scale^2) entries.
    """

    K_it: int
    denoiser: DenoiserSpec
    sampler_a: object
    sampler_b: object
    m: int
    n: int
    N_mc: int = 10_000
    seed: int = 0
    init_M0: np.ndarray = None
    init_Q0: np.ndarray = None
    init_scale: float = 1.0
    noise_var: float = 1.0
    gamma_normalizer: str = "m"

    @property
    def beta(self):
        return self.m / self.n

    def validate(self):
        if not self.N_mc >= 1:
            raise ParameterError("N_mc must be at least 1")
        if not (self.m > 0 and self.n > 0):
            raise ParameterError("dims must be positive")
        if not self.K_it >= 1:
            raise ParameterError("K_it must be positive")
        if self.gamma_normalizer not in GAMMA_NORMALIZERS:
            raise ParameterError(f"gamma_normalizer must be one of {GAMMA_NORMALIZERS}")


@dataclass
class SeState:
    k: int
    M_bar_a: np.ndarray
    M_bar_b: np.ndarray
    Q_bar_a: np.ndarray
    Q_bar_b: np.ndarray
    F_bar_a: np.ndarray
    F_bar_b: np.ndarray
    Gamma_bar_a: np.ndarray
    Gamma_bar_b: np.ndarray
    Sigma_a: np.ndarray
    Sigma_b: np.ndarray
    C_a: np.ndarray
    ens_a: tuple
    ens_b: tuple
    loss_pred: float = float("nan")
    loss_truth_pred: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def mse_pred(self):
        return gram_m_mse(self.Sigma_a, self.Sigma_b, self.M_bar_a, self.M_bar_b, self.Q_bar_a, self.Q_bar_b)

    @property
    def loss_normalized_pred(self):
        return self.loss_pred / self.loss_truth_pred


def _joint(rng, N, C11, C22, C12):
    d = C11.shape[0]
    L = psd_factor(np.block([[C11, C12], [C12.T, C22]]))
    g = rng.standard_normal((N, 2 * d)) @ L.T
    return g[:, :d], g[:, d:]


def _gauss(rng, N, C):
    return rng.standard_normal((N, C.shape[0])) @ psd_factor(C).T


def _reg(X, r, lam, kind):
    if kind == "l2":
        return 0.5 * lam * np.mean(np.sum(X**2, axis=1) / r)
    return lam * np.mean(np.sum(np.abs(X), axis=1) / np.sqrt(r))


def _check(k, *mats):
    for X in mats:
        if not np.all(np.isfinite(X)):
            raise DivergenceError("non-finite state evolution quantity", iteration=k)


def run_se(cfg):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, beta, den = cfg.N_mc, cfg.beta, cfg.denoiser
    kind, lu, lv = den.kind, den.lambda_u, den.lambda_v
    g_scale = 1.0 / beta if cfg.gamma_normalizer == "m" else 1.0

    Bt, Rv = cfg.sampler_b(rng, N)
    d = Bt.shape[1]
    sig_b = Bt.T @ Bt / N / beta
    M0 = np.zeros((d, d)) if cfg.init_M0 is None else np.asarray(cfg.init_M0, dtype=float)
    Q0 = cfg.init_scale**2 / beta * np.eye(d) if cfg.init_Q0 is None else np.asarray(cfg.init_Q0, dtype=float)
    # B_0 = B K + N(0, S0) reproduces (M0, Q0) in the m-normalized convention
    K0 = np.linalg.lstsq(sig_b, M0, rcond=None)[0]
    S0 = beta * _sym(Q0 - K0.T @ sig_b @ K0)
    init_B = lambda Bs: Bs @ K0 + _gauss(rng, Bs.shape[0], S0)  # noqa: E731
    Bh = init_B(Bt)

    Ga = np.zeros((d, d))
    Cb = None
    prev_a = prev_b = None
    states = []
    for k in range(cfg.K_it):
        sig_b = Bt.T @ Bt / N / beta
        Mb = Bt.T @ Bh / N / beta
        Qb = _sym(Bh.T @ Bh) / N / beta
        Fa = Qb - Ga
        At, Ru = cfg.sampler_a(rng, N)
        if k == 0:
            T = _gauss(rng, N, Qb)
        else:
            T, Tp = _joint(rng, N, Qb, prev_a[0], Cb)
        Ah, Ja = denoise_rows(At @ Mb + T, Ru, Fa, lu, kind)
        Gb = Ja
        Ma = At.T @ Ah / N
        Qa = _sym(Ah.T @ Ah) / N
        sig_a = At.T @ At / N
        Ca = np.zeros((d, d))
        if k > 0:
            Ah_prev, _ = denoise_rows(At @ prev_a[1] + Tp, Ru, prev_a[2], lu, kind, Ah)
            Ca = Ah.T @ Ah_prev / N
        _check(k, Ah, Ma, Qa, Gb, Ca)

        err = np.trace(sig_a @ sig_b) - 2 * np.trace(Ma @ Mb.T) + np.trace(Qa @ Qb)
        noise = 0.5 * cfg.n * cfg.noise_var
        loss = (noise + 0.5 * err - np.trace(Ah.T @ T) / N - np.trace(Ca @ Ga)
                + _reg(Ah, Ru, lu, kind) + _reg(Bh, Rv, lv, kind) / beta)
        loss_true = noise + _reg(At, Ru, lu, kind) + _reg(Bt, Rv, lv, kind) / beta
        states.append(SeState(k, Ma, Mb, Qa, Qb, Fa, Qa - Gb, Ga, Gb, sig_a, sig_b, Ca,
                              (At, Ah, Ru), (Bt, Bh, Rv), loss, loss_true))

        Fb = Qa - Gb
        Bt2, Rv2 = cfg.sampler_b(rng, N)
        if k == 0:
            S = _gauss(rng, N, Qa)
            Bh_prev = init_B(Bt2)
        else:
            S, Sp = _joint(rng, N, Qa, prev_b[0], Ca)
            Bh_prev = None
        Bh_next, Jb = denoise_rows(Bt2 @ Ma + S, Rv2, Fb, lv, kind)
        if Bh_prev is None:
            Bh_prev, _ = denoise_rows(Bt2 @ prev_b[1] + Sp, Rv2, prev_b[2], lv, kind, Bh_next)
        _check(k, Bh_next, Jb)
        Cb = Bh_next.T @ Bh_prev / N / beta
        prev_a, prev_b = (Qb, Mb, Fa), (Qa, Ma, Fb)
        Bt, Rv, Bh = Bt2, Rv2, Bh_next
        Ga = Jb * g_scale
    return states


def se_metrics(state, edges=None):
    """Row-level and M-level predictions for one SE iteration."""
    At, Ah, Ru = state.ens_a
    Bt, Bh, Rv = state.ens_b
    edges = decile_edges(Ru) if edges is None else edges
    _, cond = conditional_row_mse(At, Ah, Ru, edges)
    return dict(
        k=state.k,
        row_mse_a=float(np.mean(np.sum((At - Ah) ** 2, axis=1))),
        row_mse_b=float(np.mean(np.sum((Bt - Bh) ** 2, axis=1))),
        overlap_a=float(np.mean(np.abs(np.sum(At * Ah, axis=1)))),
        overlap_b=float(np.mean(np.abs(np.sum(Bt * Bh, axis=1)))),
        mse_M=state.mse_pred,
        loss_normalized=state.loss_normalized_pred,
        bin_edges=edges,
        conditional_mse=cond,
    )


def se_config_for_instance(model, prior, amp_cfg, B0, N_mc=10_000, seed=0, empirical=False):
    """SE configuration matched to one AMP instance and its initialization B0."""
    m, n, d = model.m, model.n, model.d
    B = model.B
    if empirical:
        sa, sb = EmpiricalSampler(model.A, model.r_u), EmpiricalSampler(B, model.r_v)
    else:
        sa = PriorSampler(prior, "u", d, m, n)
        sb = PriorSampler(prior, "v", d, m, n)
    return SeConfig(amp_cfg.K_it, amp_cfg.denoiser, sa, sb, m, n, N_mc=N_mc, seed=seed,
                    init_M0=B.T @ B0 / m, init_Q0=B0.T @ B0 / m, gamma_normalizer=amp_cfg.gamma_normalizer)
