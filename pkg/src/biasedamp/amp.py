"""Biased low-rank AMP on the scaled observation Y~."""
from dataclasses import dataclass, field, replace

import numpy as np

from .blas import matmul
from .denoise import DenoiserSpec, denoise_rows
from .errors import ConditioningError, DivergenceError, ParameterError
from .metrics import EvalRecord, gram_m_mse, overlap, quadratic_loss

GAMMA_NORMALIZERS = ("m", "paper")


@dataclass
class AmpConfig:
    """``init`` is "gaussian" (i.i.d. N(0, init_scale^2) entries for B_0),
    "spectral" or "explicit" (use ``init_B``).

    ``gamma_normalizer`` sets the divisor of the B-side Jacobian sum that
    forms Gamma_a: "m" (default, consistent with the m-normalized state
    evolution) or "paper" (divide by n).
    """

    K_it: int = 10
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    init: str = "gaussian"
    init_seed: int = 0
    init_scale: float = 1.0
    init_B: np.ndarray = None
    track_truth: object = None
    stationarity_tol: float = 1e-6
    gamma_normalizer: str = "m"

    def validate(self):
        if not (isinstance(self.K_it, (int, np.integer)) and self.K_it >= 1):
            raise ParameterError("K_it must be a positive integer")
        if self.init not in ("gaussian", "spectral", "explicit"):
            raise ParameterError(f"unknown init {self.init!r}")
        if self.init == "gaussian" and not self.init_scale > 0:
            raise ParameterError("init_scale must be positive")
        if self.init == "explicit" and self.init_B is None:
            raise ParameterError("explicit init needs init_B")
        if self.gamma_normalizer not in GAMMA_NORMALIZERS:
            raise ParameterError(f"gamma_normalizer must be one of {GAMMA_NORMALIZERS}")


@dataclass
class AmpState:
    """Iteration k. ``B_hat`` is B_k (input to the A update), ``B_next`` is B_{k+1}."""

    k: int
    A_hat: np.ndarray
    B_hat: np.ndarray
    B_next: np.ndarray
    P_a: np.ndarray
    P_b: np.ndarray
    F_a: np.ndarray
    F_b: np.ndarray
    Gamma_a: np.ndarray
    Gamma_b: np.ndarray
    Q_a: np.ndarray
    Q_b: np.ndarray
    M_a: np.ndarray = None
    M_b: np.ndarray = None
    C_a: np.ndarray = None


def initial_B(obs, d, cfg):
    if cfg.init == "explicit":
        B0 = np.array(cfg.init_B, dtype=float)
        if B0.shape != (obs.n, d):
            raise ParameterError(f"init_B has shape {B0.shape}, expected {(obs.n, d)}")
        return B0
    if cfg.init == "spectral":
        from .baselines import spectral_estimate

        return spectral_estimate(obs, d).B_hat
    rng = np.random.default_rng(cfg.init_seed)
    return cfg.init_scale * rng.standard_normal((obs.n, d))


def _finite(k, **mats):
    for name, X in mats.items():
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"non-finite values in {name}", iteration=k)


def run_amp(obs, bias=None, cfg=None, d=None, stop_tol=None):
    """Run AMP for cfg.K_it iterations; one AmpState per iteration.

    d defaults to the truth's rank, the explicit init's width, or 10.
    With ``stop_tol`` the run ends early once state_change drops below it.
    """
    cfg = AmpConfig() if cfg is None else cfg
    cfg.validate()
    bias = obs.bias if bias is None else bias
    truth = cfg.track_truth
    if d is None:
        d = truth.d if truth is not None else (np.shape(cfg.init_B)[1] if cfg.init_B is not None else 10)
    m, n = obs.shape
    sm = np.sqrt(m)
    Y = obs.Y_tilde
    ru, rv = bias.rate_u, bias.rate_v
    den = cfg.denoiser
    g_scale = n / m if cfg.gamma_normalizer == "m" else 1.0
    if truth is not None:
        At, Bt = truth.A, truth.B
    B = initial_B(obs, d, cfg)
    Ga = np.zeros((d, d))
    A_prev = np.zeros((m, d))
    warm_a = warm_b = None
    states = []
    for k in range(cfg.K_it):
        try:
            Qb = B.T @ B / m
            Fa = Qb - Ga
            Pa = matmul(Y, B) / sm - A_prev @ Ga
            _finite(k, P_a=Pa, F_a=Fa)
            A, Ja = denoise_rows(Pa, ru, Fa, den.lambda_u, den.kind, warm_a)
            Gb = Ja
            Qa = A.T @ A / m
            Fb = Qa - Gb
            Pb = matmul(Y.T, A) / sm - B @ Gb
            _finite(k, A_hat=A, P_b=Pb, F_b=Fb)
            B_next, Jb = denoise_rows(Pb, rv, Fb, den.lambda_v, den.kind, warm_b)
            _finite(k, B_next=B_next, Gamma_a=Jb)
        except ConditioningError as e:
            raise ConditioningError(f"iteration {k}: {e}") from e
        st = AmpState(k, A, B, B_next, Pa, Pb, Fa, Fb, Ga, Gb, Qa, Qb, C_a=A.T @ A_prev / m)
        if truth is not None:
            st.M_a = At.T @ A / m
            st.M_b = Bt.T @ B / m
        states.append(st)
        if stop_tol is not None and k > 0 and state_change(states[-2], st) < stop_tol:
            break
        A_prev, warm_a, warm_b = A, A, B_next
        B = B_next
        Ga = Jb * g_scale
    return states


def _gradients(A, B, obs):
    m = obs.m
    sm = np.sqrt(m)
    Y = obs.Y_tilde
    gA = -(matmul(Y, B) - A @ (B.T @ B) / sm) / sm
    gB = -(matmul(Y.T, A) - B @ (A.T @ A) / sm) / sm
    return gA, gB


def _subgrad_dist(g, X, t):
    """Distance from 0 to g + t * d|X|_1 (t per row)."""
    t = t[:, None]
    on = X != 0
    return np.where(on, np.abs(g + t * np.sign(X)), np.maximum(np.abs(g) - t, 0.0))


def loss_gradient(A, B, obs, bias, den):
    """Gradient (or minimum-norm subgradient for l1) of the quadratic loss."""
    gA, gB = _gradients(A, B, obs)
    ru, rv = bias.rate_u, bias.rate_v
    if den.kind == "l2":
        return gA + den.lambda_u * A / ru[:, None], gB + den.lambda_v * B / rv[:, None]
    return (_subgrad_dist(gA, A, den.lambda_u / np.sqrt(ru)),
            _subgrad_dist(gB, B, den.lambda_v / np.sqrt(rv)))


def stationarity_residual(state, obs, bias=None, denoiser=None):
    """max(|dL/dA|_F, |dL/dB|_F) at the returned pair (A_k, B_{k+1})."""
    bias = obs.bias if bias is None else bias
    denoiser = DenoiserSpec() if denoiser is None else denoiser
    gA, gB = loss_gradient(state.A_hat, state.B_next, obs, bias, denoiser)
    return float(max(np.linalg.norm(gA), np.linalg.norm(gB)))


def state_change(prev, cur):
    """Relative change between consecutive iterates on both sides."""
    da = np.linalg.norm(cur.A_hat - prev.A_hat) / max(np.linalg.norm(cur.A_hat), 1e-300)
    db = np.linalg.norm(cur.B_next - prev.B_next) / max(np.linalg.norm(cur.B_next), 1e-300)
    return float(max(da, db))


def evaluate_states(states, obs, denoiser, truth=None):
    """Loss, normalized loss and M-MSE per iteration, pairing (A_k, B_k)."""
    loss_true = quadratic_loss(truth.A, truth.B, obs, denoiser) if truth is not None else None
    out = []
    for st in states:
        loss = quadratic_loss(st.A_hat, st.B_hat, obs, denoiser)
        rec = EvalRecord(st.k, loss)
        if truth is not None:
            m = obs.m
            sig_a = truth.A.T @ truth.A / m
            sig_b = truth.B.T @ truth.B / m
            rec.loss_normalized = loss / loss_true
            rec.mse_M = gram_m_mse(sig_a, sig_b, st.M_a, st.M_b, st.Q_a, st.Q_b)
            rec.overlap_a = overlap(truth.A, st.A_hat)
            rec.overlap_b = overlap(truth.B, st.B_hat)
        out.append(rec)
    return out


def run_until_converged(obs, cfg, tol=1e-10, max_it=200, d=None):
    """Iterate until state_change < tol; returns (states, converged)."""
    states = run_amp(obs, cfg=replace(cfg, K_it=max_it), d=d, stop_tol=tol)
    ok = len(states) > 1 and state_change(states[-2], states[-1]) < tol
    return states, ok
