"""Command-line entry point.

    biasedamp <command> [--config FILE] [--set key=value ...] [--out DIR] [--seed N] [--threads N]

Exit status: 0 success, 2 configuration error, 3 numeric divergence, 1 other failures.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .amp import evaluate_states, run_amp
from .baselines import gradient_descent, spectral_estimate
from .bias import estimate_bias
from .errors import ArtifactError, ConfigError
from .experiments import (amp_state_rows, instance_seeds, load_config, run_experiment, se_state_rows,
                          verify_aggregate)
from .io import FLOAT_FMT, read_counts, read_model, write_bias, write_counts, write_model, write_rows
from .metrics import normalized_m_mse, quadratic_loss
from .model import generate_ground_truth, sample_counts
from .scorechannel import build_scaled_observation
from .se import PriorSampler, SeConfig, run_se

log = logging.getLogger("biasedamp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _config(args):
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.out is not None:
        sets.append(f"out={json.dumps(str(args.out))}")
    return load_config(args.config, sets)


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _observation(args):
    if args.counts is None:
        raise ConfigError("--counts is required")
    counts = read_counts(args.counts)
    bias = estimate_bias(counts)
    return counts, bias, build_scaled_observation(counts, bias)


def _truth(args):
    return read_model(args.model) if args.model else None


def cmd_generate(args, cfg):
    out = _out(cfg)
    s_model, s_counts = instance_seeds(cfg.seed, 0)[:2]
    model = generate_ground_truth(cfg.prior(), cfg.m, cfg.n, cfg.d, s_model)
    write_model(out / "model", model)
    write_counts(out / "counts.mtx", sample_counts(model, s_counts))
    log.info("wrote %s", out)


def cmd_estimate_bias(args, cfg):
    out = _out(cfg)
    if args.counts is None:
        raise ConfigError("--counts is required")
    write_bias(out / "bias", estimate_bias(read_counts(args.counts)))


def cmd_amp(args, cfg):
    out = _out(cfg)
    _, bias, obs = _observation(args)
    truth = _truth(args)
    s_init = instance_seeds(cfg.seed, 0)[2]
    den = cfg.denoiser_spec()
    states = run_amp(obs, cfg=cfg.amp_config(s_init, truth), d=cfg.d)
    evals = evaluate_states(states, obs, den, truth)
    write_rows(out / "amp_state.csv", amp_state_rows(states, evals, obs, bias, den))
    np.savetxt(out / "A_hat.csv", states[-1].A_hat, fmt=FLOAT_FMT, delimiter=",")
    np.savetxt(out / "B_hat.csv", states[-1].B_next, fmt=FLOAT_FMT, delimiter=",")
    if args.dump_factors:
        fdir = out / "factors"
        fdir.mkdir(exist_ok=True)
        for st in states:
            np.savetxt(fdir / f"A_{st.k:03d}.csv", st.A_hat, fmt=FLOAT_FMT, delimiter=",")
            np.savetxt(fdir / f"B_{st.k:03d}.csv", st.B_hat, fmt=FLOAT_FMT, delimiter=",")


def cmd_se(args, cfg):
    out = _out(cfg)
    prior = cfg.prior()
    se_cfg = SeConfig(cfg.K_it, cfg.denoiser_spec(), PriorSampler(prior, "u", cfg.d, cfg.m, cfg.n),
                      PriorSampler(prior, "v", cfg.d, cfg.m, cfg.n), cfg.m, cfg.n, N_mc=cfg.N_mc,
                      seed=instance_seeds(cfg.seed, 0)[3], init_scale=cfg.init_scale,
                      gamma_normalizer=cfg.gamma_normalizer)
    write_rows(out / "se_state.csv", se_state_rows(run_se(se_cfg)))


def cmd_baseline(args, cfg):
    out = _out(cfg)
    _, bias, obs = _observation(args)
    truth = _truth(args)
    den = cfg.denoiser_spec()
    loss_true = quadratic_loss(truth.A, truth.B, obs, den) if truth is not None else float("nan")
    methods = ("spectral", "gd") if args.method == "both" else (args.method,)
    rows = []
    for method in methods:
        if method == "spectral":
            res = spectral_estimate(obs, cfg.d, den)
        else:
            steps = cfg.gd_steps or 3000
            res = gradient_descent(obs, bias, den, steps=steps, lr=cfg.gd_lr, d=cfg.d,
                                   seed=instance_seeds(cfg.seed, 0)[4])
        mse = normalized_m_mse(truth.A, truth.B, res.A_hat, res.B_hat) if truth is not None else float("nan")
        rows.append(dict(method=method, iterations=res.iterations, loss=res.loss,
                         loss_normalized=res.loss / loss_true, mse_M=mse))
        np.savetxt(out / f"{method}_A_hat.csv", res.A_hat, fmt=FLOAT_FMT, delimiter=",")
        np.savetxt(out / f"{method}_B_hat.csv", res.B_hat, fmt=FLOAT_FMT, delimiter=",")
        log.info("%s finished in %.2fs", method, res.wall_time)
    write_rows(out / "baseline.csv", rows)


def cmd_experiment(args, cfg):
    out = run_experiment(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    if not manifest["aggregated"]:
        raise ArtifactError("every instance failed; see manifest.json")
    print(out)


def cmd_verify_aggregate(args, cfg):
    problems = verify_aggregate(args.directory)
    for p in problems:
        print(p)
    if problems:
        raise ArtifactError(f"{len(problems)} aggregate mismatches")
    print("aggregates match instance files")


COMMANDS = {
    "generate": cmd_generate,
    "estimate-bias": cmd_estimate_bias,
    "amp": cmd_amp,
    "se": cmd_se,
    "baseline": cmd_baseline,
    "experiment": cmd_experiment,
    "verify-aggregate": cmd_verify_aggregate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="biasedamp", description="Poisson embedding estimation with biased low-rank AMP.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="sample a ground-truth model and its counts")
    helps = {"estimate-bias": "fit row and column biases to a count matrix",
             "amp": "run biased low-rank AMP on a count matrix",
             "baseline": "run the spectral and gradient-descent estimators"}
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--counts", help="count matrix (.mtx or .csv)")
        if name != "estimate-bias":
            sp.add_argument("--model", help="ground-truth model directory for error tracking")
        if name == "amp":
            sp.add_argument("--dump-factors", action="store_true", help="write A_k and B_k for every iteration")
        if name == "baseline":
            sp.add_argument("--method", choices=("spectral", "gd", "both"), default="both")
    sub.add_parser("se", parents=[common], help="run state evolution for the configured prior")
    sub.add_parser("experiment", parents=[common], help="run a full experiment bundle")
    sp = sub.add_parser("verify-aggregate", parents=[common], help="recompute aggregates of a bundle")
    sp.add_argument("directory")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = _config(args)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg)
    except ArtifactError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
