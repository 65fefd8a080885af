"""Row-wise denoisers for the squared-norm and l1 regularizers.

Each row solves  min_a  1/2 a^T F a - p^T a + penalty(a; lambda, r)
with penalty lambda/(2r) |a|^2 (l2) or lambda/sqrt(r) |a|_1 (l1).
The batched functions return the denoised rows and the mean Jacobian
d a / d p over rows.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, ConvergenceError, ParameterError

EPS_PD = 1e-10

_KINDS = {"l2": "l2", "squared_norm": "l2", "l1": "l1"}


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str = "l2"
    lambda_u: float = 1e-3
    lambda_v: float = 1e-3

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"unknown denoiser kind {self.kind!r}")
        object.__setattr__(self, "kind", _KINDS[self.kind])
        if not (self.lambda_u >= 0 and self.lambda_v >= 0):
            raise ParameterError("regularization weights must be nonnegative")


@dataclass(frozen=True)
class DenoiseResult:
    a_hat: np.ndarray
    jacobian: np.ndarray


def _sym(F):
    F = np.asarray(F, dtype=float)
    return (F + F.T) / 2


def penalty(A, r, lam, kind):
    """Regularizer of the scaled rows A (one row per entry of r)."""
    if kind == "l2":
        return 0.5 * lam * float(np.sum(A**2 / r[:, None]))
    return lam * float(np.sum(np.abs(A) / np.sqrt(r)[:, None]))


def l2_rows(P, r, F, lam):
    """a_i = p_i (F + lam/r_i I)^-1 for all rows, through one eigendecomposition of F.

    Inside AMP, F = Q - Gamma may be slightly indefinite at early iterations;
    the closed form is still the stationary point and is applied as is. Only
    (near-)singular systems are rejected.
    """
    P = np.atleast_2d(P)
    r = np.broadcast_to(np.asarray(r, dtype=float), (P.shape[0],))
    w, Q = np.linalg.eigh(_sym(F))
    shifted = w[None, :] + (lam / r)[:, None]
    floor = EPS_PD * max(1.0, np.abs(w).max())
    if not np.all(np.isfinite(shifted)) or np.abs(shifted).min() <= floor:
        raise ConditioningError(f"F + (lambda/r) I is singular (smallest |eigenvalue| {np.abs(shifted).min():.3e})")
    inv = 1.0 / shifted
    A = ((P @ Q) * inv) @ Q.T
    J = (Q * inv.mean(axis=0)) @ Q.T
    return A, J


def _is_pd(F):
    w = np.linalg.eigvalsh(F)
    if not np.all(np.isfinite(w)):
        raise ConditioningError("F has non-finite entries")
    return w.min() > EPS_PD * max(1.0, np.abs(w).max())


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _l1_cd(P, t, F, A, tol, max_sweeps):
    """Cyclic coordinate descent; stops when the largest coordinate change
    falls below tol relative to max(1, max |a|)."""
    d = F.shape[0]
    diag = np.diag(F)
    for _ in range(max_sweeps):
        G = A @ F
        change = 0.0
        for k in range(d):
            c = P[:, k] - G[:, k] + diag[k] * A[:, k]
            new = _soft(c, t) / diag[k]
            step = new - A[:, k]
            if step.any():
                G += np.outer(step, F[k])
                A[:, k] = new
                change = max(change, np.abs(step).max())
        if change < tol * max(1.0, np.abs(A).max()):
            return A
    raise ConvergenceError(f"l1 coordinate descent did not converge in {max_sweeps} sweeps", change)


def _solve_patterns(P, t, F, S):
    """b_S = F_SS^-1 (p_S - t s_S) row by row, grouped by sign pattern S."""
    A = np.zeros_like(P)
    patterns, inverse = np.unique(S, axis=0, return_inverse=True)
    for g, pat in enumerate(patterns):
        rows = np.flatnonzero(inverse.ravel() == g)
        idx = np.flatnonzero(pat)
        if idx.size == 0:
            continue
        rhs = P[np.ix_(rows, idx)] - t[rows, None] * pat[idx][None, :]
        try:
            A[np.ix_(rows, idx)] = np.linalg.solve(F[np.ix_(idx, idx)], rhs.T).T
        except np.linalg.LinAlgError:
            raise ConditioningError("singular active block in the l1 denoiser") from None
    return A


def _l1_active_set(P, t, F, max_iter=50):
    """KKT stationary points of the l1 row problem by sign-pattern iteration.

    Starts from the signs of F^-1 p (the t -> 0 solution), solves on the
    current pattern, drops sign violators and adds inactive coordinates whose
    residual exceeds t. Returns the rows and a mask of rows that settled.
    """
    try:
        S = np.sign(np.linalg.solve(F, P.T).T)
    except np.linalg.LinAlgError:
        raise ConditioningError("F is singular") from None
    A = np.zeros_like(P)
    todo = np.arange(P.shape[0])
    for _ in range(max_iter):
        Ai = _solve_patterns(P[todo], t[todo], F, S[todo])
        G = P[todo] - Ai @ F
        Si = S[todo]
        keep = (Si != 0) & (np.sign(Ai) == Si)
        add = (Si == 0) & (np.abs(G) > t[todo, None])
        S_new = np.where(keep, Si, 0.0) + np.where(add, np.sign(G), 0.0)
        done = np.all(S_new == Si, axis=1)
        A[todo[done]] = Ai[done]
        S[todo] = S_new
        todo = todo[~done]
        if todo.size == 0:
            break
    settled = np.ones(P.shape[0], dtype=bool)
    settled[todo] = False
    return A, settled


def _kkt_ok(P, t, F, A, S):
    G = P - A @ F
    signs = np.where(S != 0, np.sign(A) == S, True)
    inactive = np.where(S == 0, np.abs(G) <= t[:, None] * (1 + 1e-9), True)
    return np.all(signs & inactive, axis=1)


def _l1_neighbour_patterns(P, t, F):
    """Search the patterns one change away from sign(F^-1 p).

    With indefinite F a coordinate whose Schur complement is negative has its
    stationary sign opposite to the residual, which the add rule of the
    pattern iteration cannot reach. Among KKT-consistent candidates the one
    with the lowest objective is kept.
    """
    N, d = P.shape
    S0 = np.sign(np.linalg.solve(F, P.T).T)
    best = np.zeros_like(P)
    best_obj = np.full(N, np.inf)
    cands = [S0]
    for k in range(d):
        for v in (0.0, None):
            S = S0.copy()
            S[:, k] = 0.0 if v == 0.0 else -S0[:, k]
            cands.append(S)
    for S in cands:
        A = _solve_patterns(P, t, F, S)
        obj = 0.5 * np.einsum("ij,jk,ik->i", A, F, A) - np.sum(P * A, axis=1) + t * np.abs(A).sum(axis=1)
        take = _kkt_ok(P, t, F, A, S) & (obj < best_obj)
        best[take], best_obj[take] = A[take], obj[take]
    return best, np.isfinite(best_obj)


def _l1_homotopy(p, t, F, max_steps=None):
    """Exact l1 row solution by following the path from a = 0 at tau = max|p| down to t.

    On a fixed sign pattern the solution is linear in tau; the path changes
    pattern when an active coefficient reaches zero or an inactive residual
    reaches tau. Needs positive definite F; returns None if the path does not
    end at a KKT point.
    """
    d = len(p)
    a = np.zeros(d)
    s = np.zeros(d)
    c = p.copy()
    tau = np.abs(c).max()
    if tau <= t:
        return a
    j = int(np.argmax(np.abs(c)))
    s[j] = np.sign(c[j])
    for _ in range(max_steps or 20 * d):
        S = np.flatnonzero(s)
        w = np.zeros(d)
        w[S] = np.linalg.solve(F[np.ix_(S, S)], s[S])
        v = F @ w
        # decreasing tau by delta moves a by delta w and the residual c by -delta v
        step, event = tau - t, None
        with np.errstate(divide="ignore", invalid="ignore"):
            drop = np.where((s != 0) & (a * w < 0), -a / w, np.inf)
            up = np.where((s == 0) & (v < 1), (tau - c) / (1 - v), np.inf)
            down = np.where((s == 0) & (v > -1), (tau + c) / (1 + v), np.inf)
        for cand, kind in ((drop, "drop"), (up, "add"), (down, "add")):
            k = int(np.argmin(cand))
            if 0 < cand[k] < step:
                step, event = cand[k], (kind, k)
        a += step * w
        c -= step * v
        tau -= step
        if event is None:
            break
        kind, k = event
        if kind == "drop":
            a[k], s[k] = 0.0, 0.0
        else:
            s[k] = np.sign(c[k])
    else:
        return None
    # final exact solve on the pattern, then a KKT check
    S = np.flatnonzero(s)
    a = np.zeros(d)
    a[S] = np.linalg.solve(F[np.ix_(S, S)], p[S] - t * s[S])
    ok = _kkt_ok(p[None, :], np.array([t]), F, a[None, :], s[None, :])[0]
    return a if ok else None


def l1_rows(P, r, F, lam, A0=None, tol=1e-10, max_sweeps=10_000):
    """Rows of the l1 denoiser and their mean Jacobian.

    The sign-pattern iteration runs first; it gives exact KKT points and also
    covers indefinite F at early AMP iterations, where it plays the role of
    the l2 closed form. Rows whose pattern cycles are solved along the
    homotopy path, with cyclic coordinate descent warm-started from A0 as the
    last resort (F must then be positive definite).
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    N, d = P.shape
    r = np.broadcast_to(np.asarray(r, dtype=float), (N,))
    F = _sym(F)
    t = lam / np.sqrt(r)
    # a = 0 satisfies KKT whenever |p| <= t; F may then be singular
    A = np.zeros_like(P)
    settled = np.all(np.abs(P) <= t[:, None], axis=1)
    if not settled.all():
        rest = np.flatnonzero(~settled)
        A[rest], settled[rest] = _l1_active_set(P[rest], t[rest], F)
    if not settled.all():
        rest = np.flatnonzero(~settled)
        A[rest], found = _l1_neighbour_patterns(P[rest], t[rest], F)
        settled[rest[found]] = True
    if not settled.all():
        if not _is_pd(F):
            raise ConvergenceError("l1 stationary point not found for indefinite F")
        for i in np.flatnonzero(~settled):
            a = _l1_homotopy(P[i], t[i], F)
            if a is not None:
                A[i], settled[i] = a, True
    if not settled.all():
        rest = np.flatnonzero(~settled)
        start = np.zeros((rest.size, d)) if A0 is None else np.array(A0, dtype=float)[rest]
        A[rest] = _l1_cd(P[rest], t[rest], F, start, tol, max_sweeps)
    return A, _l1_mean_jacobian(A != 0, F)


def _l1_mean_jacobian(active, F):
    N, d = active.shape
    J = np.zeros((d, d))
    patterns, counts = np.unique(active, axis=0, return_counts=True)
    for pat, c in zip(patterns, counts):
        idx = np.flatnonzero(pat)
        if idx.size:
            J[np.ix_(idx, idx)] += c * np.linalg.inv(F[np.ix_(idx, idx)])
    return J / N


def denoise_rows(P, r, F, lam, kind, A0=None):
    if kind == "l2":
        return l2_rows(P, r, F, lam)
    return l1_rows(P, r, F, lam, A0=A0)


def denoise_l2(p, r, F, lam):
    F = _sym(F)
    M = F + (lam / r) * np.eye(F.shape[0])
    try:
        c = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ConditioningError("F + (lambda/r) I is not positive definite") from None
    inv = np.linalg.inv(c)
    jac = inv.T @ inv
    return DenoiseResult(jac @ np.asarray(p, dtype=float), jac)


def denoise_l1(p, r, F, lam, a0=None, tol=1e-10, max_sweeps=10_000):
    p = np.asarray(p, dtype=float)
    A0 = None if a0 is None else np.atleast_2d(a0)
    A, _ = l1_rows(p[None, :], np.array([r], dtype=float), F, lam, A0=A0, tol=tol, max_sweeps=max_sweeps)
    a = A[0]
    F = _sym(F)
    jac = np.zeros_like(F)
    idx = np.flatnonzero(a)
    if idx.size:
        jac[np.ix_(idx, idx)] = np.linalg.inv(F[np.ix_(idx, idx)])
    return DenoiseResult(a, jac)


def average_jacobian(results, normalizer):
    if len(results) == 0:
        raise ParameterError("no Jacobians to average")
    return np.sum([res.jacobian for res in results], axis=0) / normalizer
