"""Reference estimators: rank-d truncation of Y~ and block gradient descent."""
import time
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, svds

from .blas import matmul
from .errors import ConvergenceError, ParameterError, StepSizeError
from .metrics import quadratic_loss

ROUNDOFF = 1e-14


@dataclass
class BaselineResult:
    A_hat: np.ndarray
    B_hat: np.ndarray
    iterations: int
    loss: float
    wall_time: float
    history: np.ndarray = None


def spectral_estimate(obs, d, loss_denoiser=None):
    """Rank-d truncation Y_d = U S V^T split as A = m^(1/4) U S^(1/2), B = m^(1/4) V S^(1/2),
    so that A B^T / sqrt(m) = Y_d."""
    m, n = obs.shape
    if not 1 <= d <= min(m, n):
        raise ParameterError(f"rank {d} out of range for a {m}x{n} matrix")
    t0 = time.perf_counter()
    Y = obs.Y_tilde
    if d < min(m, n) - 1:
        try:
            op = LinearOperator((m, n), matvec=lambda x: matmul(Y, x.reshape(-1, 1)).ravel(),
                                rmatvec=lambda x: matmul(Y.T, x.reshape(-1, 1)).ravel(),
                                matmat=lambda X: matmul(Y, X), rmatmat=lambda X: matmul(Y.T, X), dtype=float)
            U, s, Vt = svds(op, k=d, v0=np.ones(min(m, n)) / np.sqrt(min(m, n)), maxiter=10_000)
        except Exception as e:
            raise ConvergenceError(f"truncated SVD failed: {e}") from e
        order = np.argsort(s)[::-1]
        U, s, Vt = U[:, order], s[order], Vt[order]
    else:
        U, s, Vt = np.linalg.svd(Y, full_matrices=False)
        U, s, Vt = U[:, :d], s[:d], Vt[:d]
    scale = m**0.25 * np.sqrt(s)
    A, B = U * scale, Vt.T * scale
    loss = quadratic_loss(A, B, obs, loss_denoiser) if loss_denoiser is not None else float("nan")
    return BaselineResult(A, B, 1, loss, time.perf_counter() - t0)


def _loss_parts(YB, A, BtB, sm, reg):
    # 1/2 |Y - A B^T/sm|^2 without the constant 1/2 |Y|^2
    return -np.einsum("ij,ij->", A, YB) / sm + 0.5 * np.einsum("ij,jk,ik->", A, BtB, A) / sm**2 + reg


def gradient_descent(obs, bias, denoiser, steps=3000, lr=0.1, A0=None, B0=None, d=10, seed=0, tol=0.0):
    """Block gradient descent on the quadratic loss (l2 regularizer only).

    Each step moves A then B along their own gradients. Both blocks start from
    step ``lr``; a step that raises the loss is halved until it does not, and the
    reduced step is kept. The two blocks get separate steps because their
    curvatures (B^T B/m versus A^T A/m) can differ by orders of magnitude.
    """
    if denoiser.kind != "l2":
        raise ParameterError("gradient descent needs the smooth l2 regularizer")
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    t0 = time.perf_counter()
    m, n = obs.shape
    sm = np.sqrt(m)
    Y = obs.Y_tilde
    ru, rv = bias.rate_u, bias.rate_v
    lu, lv = denoiser.lambda_u, denoiser.lambda_v
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, d)) if A0 is None else np.array(A0, dtype=float)
    B = rng.standard_normal((n, d)) if B0 is None else np.array(B0, dtype=float)
    half_y = 0.5 * float(np.einsum("ij,ij->", Y, Y))
    reg_a = lambda X: 0.5 * lu * np.sum(X**2 / ru[:, None])  # noqa: E731
    reg_b = lambda X: 0.5 * lv * np.sum(X**2 / rv[:, None])  # noqa: E731
    eta = [lr, lr]
    YB = matmul(Y, B)
    BtB = B.T @ B
    loss = half_y + _loss_parts(YB, A, BtB, sm, reg_a(A) + reg_b(B))
    history = [loss]
    it = 0
    for it in range(1, steps + 1):
        prev = loss
        # A block
        gA = -(YB - A @ BtB / sm) / sm + lu * A / ru[:, None]
        rb = reg_b(B)
        g2 = float(np.einsum("ij,ij->", gA, gA))
        while True:
            if eta[0] * g2 <= ROUNDOFF * abs(loss):
                # no decrease is resolvable at this step size: the block is stationary
                A_new, new = A, loss
                break
            A_new = A - eta[0] * gA
            new = half_y + _loss_parts(YB, A_new, BtB, sm, reg_a(A_new) + rb)
            if new <= loss:
                break
            eta[0] /= 2
            if eta[0] < 1e-300:
                raise StepSizeError("step size underflow on the A block", iteration=it)
        A, loss = A_new, new
        # B block
        YtA = matmul(Y.T, A)
        AtA = A.T @ A
        gB = -(YtA - B @ AtA / sm) / sm + lv * B / rv[:, None]
        ra = reg_a(A)
        g2 = float(np.einsum("ij,ij->", gB, gB))
        while True:
            if eta[1] * g2 <= ROUNDOFF * abs(loss):
                # no decrease is resolvable at this step size: the block is stationary
                B_new, new = B, loss
                break
            B_new = B - eta[1] * gB
            new = half_y + _loss_parts(YtA, B_new, AtA, sm, reg_b(B_new) + ra)
            if new <= loss:
                break
            eta[1] /= 2
            if eta[1] < 1e-300:
                raise StepSizeError("step size underflow on the B block", iteration=it)
        B, loss = B_new, new
        if not np.isfinite(loss) or loss > 1e12:
            raise StepSizeError(f"loss diverged to {loss}", iteration=it)
        YB = matmul(Y, B)
        BtB = B.T @ B
        history.append(loss)
        if tol > 0 and prev - loss < tol * abs(loss):
            break
    return BaselineResult(A, B, it, quadratic_loss(A, B, obs, denoiser), time.perf_counter() - t0, np.array(history))
