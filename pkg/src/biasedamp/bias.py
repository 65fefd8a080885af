"""Frequency-count estimates of the row and column biases.

r_u_hat and r_v_hat are each scaled to mean one. The overall count level
lambda0_hat = Z_tot / (m n) is kept separately; the expected count of a pair
under the fitted independence model is rate_u[i] * rate_v[j] =
row_sum[i] * col_sum[j] / Z_tot.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTermError, DomainError, EmptyDataError


@dataclass(frozen=True)
class BiasEstimate:
    r_u_hat: np.ndarray
    r_v_hat: np.ndarray
    z_tot: float
    lambda0_hat: float

    @property
    def m(self):
        return self.r_u_hat.size

    @property
    def n(self):
        return self.r_v_hat.size

    @property
    def s_u_hat(self):
        return np.log(self.r_u_hat)

    @property
    def s_v_hat(self):
        return np.log(self.r_v_hat)

    @property
    def rate_u(self):
        """Row rates used by the score channel and the A-side denoiser."""
        return self.r_u_hat

    @property
    def rate_v(self):
        """Column rates with the count level folded in."""
        return self.lambda0_hat * self.r_v_hat

    def delta(self, i=None, j=None):
        """Inverse Fisher information 1 / (rate_u[i] rate_v[j]); full matrix if no index."""
        if i is None and j is None:
            return 1.0 / np.outer(self.rate_u, self.rate_v)
        return 1.0 / (self.rate_u[i] * self.rate_v[j])

    @classmethod
    def from_rates(cls, rate_u, rate_v):
        """Wrap known per-side rates (e.g. the true biases) in the estimate convention."""
        rate_u = np.asarray(rate_u, dtype=float)
        rate_v = np.asarray(rate_v, dtype=float)
        if np.any(rate_u <= 0) or np.any(rate_v <= 0):
            raise DomainError("rates must be strictly positive")
        su, sv = rate_u.sum(), rate_v.sum()
        m, n = rate_u.size, rate_v.size
        return cls(m * rate_u / su, n * rate_v / sv, su * sv, su * sv / (m * n))

    def permuted(self, row_perm=None, col_perm=None):
        ru = self.r_u_hat if row_perm is None else self.r_u_hat[row_perm]
        rv = self.r_v_hat if col_perm is None else self.r_v_hat[col_perm]
        return BiasEstimate(ru, rv, self.z_tot, self.lambda0_hat)


def estimate_bias(counts, floor=False):
    Z = counts.Z
    m, n = Z.shape
    rows = np.asarray(Z.sum(axis=1, dtype=np.int64)).ravel()
    cols = np.asarray(Z.sum(axis=0, dtype=np.int64)).ravel()
    z_tot = int(rows.sum())
    if z_tot == 0:
        raise EmptyDataError("count matrix has no entries")
    r_u = m * rows.astype(float) / z_tot
    r_v = n * cols.astype(float) / z_tot
    zero_r, zero_c = np.flatnonzero(rows == 0), np.flatnonzero(cols == 0)
    if zero_r.size or zero_c.size:
        if not floor:
            raise DegenerateTermError(zero_r, zero_c)
        eps = 1.0 / z_tot
        r_u = np.maximum(r_u, eps)
        r_v = np.maximum(r_v, eps)
    return BiasEstimate(r_u, r_v, z_tot, z_tot / (m * n))


def bias_consistency_report(truth, est):
    """Mean-square errors of (r_u, r_v) against the truth, both sides in mean-one scale."""
    if truth.m != est.m or truth.n != est.n:
        raise DomainError(f"dims {truth.m}x{truth.n} vs {est.m}x{est.n}")
    ru, rv = truth.r_u, truth.r_v
    err_u = np.mean((ru / ru.mean() - est.r_u_hat) ** 2)
    err_v = np.mean((rv / rv.mean() - est.r_v_hat) ** 2)
    return float(err_u), float(err_v)
