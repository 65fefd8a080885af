"""One synthetic instance: counts, bias fit, AMP, and the matching state-evolution prediction.

Run: python demos/amp_vs_se.py
"""
from biasedamp.amp import AmpConfig, evaluate_states, run_amp
from biasedamp.bias import estimate_bias
from biasedamp.model import PriorSpec, generate_ground_truth, sample_counts
from biasedamp.scorechannel import build_scaled_observation
from biasedamp.se import run_se, se_config_for_instance, se_metrics

prior = PriorSpec()  # N(0, 0.1 I) rows, log-biases 5 + Exp(mean 0.25)
model = generate_ground_truth(prior, 500, 750, 10, seed=0)
counts = sample_counts(model, seed=1)
print(f"counts: {counts.shape[0]}x{counts.shape[1]}, total {counts.z_tot}")

# step 1: biases from row and column sums; step 2: AMP on the scaled score matrix
obs = build_scaled_observation(counts, estimate_bias(counts))
cfg = AmpConfig(K_it=10, init_seed=2, track_truth=model)
states = run_amp(obs, cfg=cfg)
evals = evaluate_states(states, obs, cfg.denoiser, model)

# SE started from the same initial overlap as this AMP run
se_states = run_se(se_config_for_instance(model, prior, cfg, states[0].B_hat, N_mc=10_000, seed=3))

print(f"{'k':>2} {'AMP loss':>10} {'SE loss':>10} {'AMP mse':>9} {'SE mse':>9}")
for e, s in zip(evals, se_states):
    met = se_metrics(s)
    print(f"{e.k:2d} {e.loss_normalized:10.5f} {met['loss_normalized']:10.5f} {e.mse_M:9.5f} {met['mse_M']:9.5f}")
print("final relative M-MSE gap:", abs(evals[-1].mse_M - se_metrics(se_states[-1])["mse_M"]) / evals[-1].mse_M)
