"""Gradient descent on the same regularized loss reaches the loss of the AMP fixed point.

Run: python demos/gd_vs_amp.py   (about 10 s)
"""
import numpy as np

from biasedamp.amp import AmpConfig, run_amp
from biasedamp.baselines import gradient_descent, spectral_estimate
from biasedamp.bias import estimate_bias
from biasedamp.metrics import normalized_m_mse, quadratic_loss
from biasedamp.model import PriorSpec, generate_ground_truth, sample_counts
from biasedamp.scorechannel import build_scaled_observation

model = generate_ground_truth(PriorSpec(), 500, 750, 10, seed=4)
counts = sample_counts(model, seed=5)
obs = build_scaled_observation(counts, estimate_bias(counts))
cfg = AmpConfig(K_it=100, init_seed=6)
den = cfg.denoiser
ref = quadratic_loss(model.A, model.B, obs, den)

states = run_amp(obs, cfg=cfg, d=10)
last = states[-1]
# GD starts where AMP started: A = 0 and AMP's initial B
gd = gradient_descent(obs, obs.bias, den, steps=3000, A0=np.zeros((500, 10)), B0=states[0].B_hat, d=10)
spec = spectral_estimate(obs, 10, den)
for name, A, B in (("AMP", last.A_hat, last.B_next), ("GD", gd.A_hat, gd.B_hat), ("spectral", spec.A_hat, spec.B_hat)):
    print(f"{name:9s} loss/loss(truth) = {quadratic_loss(A, B, obs, den) / ref:.5f}   "
          f"M-MSE = {normalized_m_mse(model.A, model.B, A, B):.5f}")
