"""Gap between the d-th and (d+1)-th singular values of the scaled scores as the noise level Delta moves.

With constant biases s_u = s_v = s, Delta = exp(-2 s). The gap opens once
Delta falls below the critical value.

Run: python demos/spectral_threshold.py
"""
import numpy as np

from biasedamp.model import PriorSpec
from biasedamp.scorechannel import delta_critical, prior_covariance, singular_sweep

prior = PriorSpec()
m, n, d = 500, 1000, 10
cov = prior_covariance(prior, d)
dc = delta_critical(cov, cov, m / n)
print(f"Delta_critical = {dc:.3e}")
factors = [1 / 16, 1 / 4, 1, 4, 16]
grid = [(-np.log(f * dc) / 2,) * 2 for f in factors]
for f, rep in zip(factors, singular_sweep(prior, m, n, d, grid, seed=0)):
    print(f"Delta = {f:6.4g} x Dc   sigma_d/sigma_d+1 = {rep.sigma_d / rep.sigma_d1:.3f}   "
          f"sigma_1 = {rep.sigma1:.3f} (bulk edge {rep.bulk_edge:.3f})")
