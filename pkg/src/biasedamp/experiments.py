"""Configuration-driven experiments: synthetic AMP vs SE runs, the Delta scatter,
the singular-value sweep and the resampled real-data protocol.

A run writes a bundle directory:

    manifest.json                 resolved config, its hash, seeds, versions, instance status
    instances/NNN/<table>.csv     per-instance tables
    aggregate/<table>.csv         mean and sample std over successful instances
    plots/*.svg                   drawn from the aggregate CSVs only

Timings are logged, never written, so bundles are bitwise reproducible.
"""
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .amp import AmpConfig, evaluate_states, run_amp, run_until_converged, stationarity_residual
from .baselines import gradient_descent, spectral_estimate
from .bias import estimate_bias
from .denoise import DenoiserSpec
from .errors import ArtifactError, ConfigError, ParameterError
from .io import flatten, read_rows, write_rows
from .metrics import binned_m_mse, decile_edges, normalized_m_mse, quadratic_loss
from .model import (BiasPrior, GroundTruthModel, PriorSpec, center_embeddings, generate_ground_truth,
                    normalize, sample_counts, sample_gaussian_surrogate)
from .scorechannel import build_scaled_observation, delta_critical, prior_covariance, singular_sweep
from .se import run_se, se_config_for_instance, se_metrics

log = logging.getLogger("biasedamp")

EXPERIMENTS = ("synthetic-l2", "synthetic-l1", "delta-scatter", "singular-sweep", "real-resample")
PRESETS = ("paper", "desk")
DESK_MAX_ENTRIES = 1.5e6
# "min_value" divides by the smallest (most negative) entry, "min_abs" by the
# smallest nonzero magnitude.
RESCALE_MODES = ("min_value", "min_abs", "none")

_EXP_BIAS = dict(kind="exponential", scale=0.25, shift=5.0)
_ZIPF_BIAS = dict(kind="zipf", alpha=1.0, c0=float(np.exp(10.0)))

# Defaults per (experiment, preset); anything not listed falls back to the dataclass defaults.
PRESET_DEFAULTS = {
    ("synthetic-l2", "paper"): dict(m=2000, n=3000, instances=20, gd_steps=3000),
    ("synthetic-l2", "desk"): dict(m=500, n=750, instances=3, gd_steps=3000),
    ("synthetic-l1", "paper"): dict(m=2000, n=3000, instances=20, denoiser="l1", sparsity=0.5),
    ("synthetic-l1", "desk"): dict(m=500, n=750, instances=3, denoiser="l1", sparsity=0.5),
    ("delta-scatter", "paper"): dict(m=2000, n=3000, instances=3),
    ("delta-scatter", "desk"): dict(m=500, n=750, instances=3),
    ("singular-sweep", "paper"): dict(m=1000, n=2000, instances=5, grid_points=9),
    ("singular-sweep", "desk"): dict(m=500, n=1000, instances=2, grid_points=5),
    ("real-resample", "paper"): dict(m=2000, n=3000, full_m=7000, full_n=8139, instances=20,
                                     bias_u=_ZIPF_BIAS, bias_v=_ZIPF_BIAS, check_fixed_point=True),
    ("real-resample", "desk"): dict(m=500, n=750, full_m=1000, full_n=1163, instances=3,
                                    bias_u=_ZIPF_BIAS, bias_v=_ZIPF_BIAS, check_fixed_point=True),
}


@dataclass
class ExperimentConfig:
    """All experiment parameters. ``m``, ``n`` are the analysed dims (the
    subsample size for real-resample, whose source matrix is ``full_m`` x ``full_n``
    or the counts at ``counts_path``)."""

    experiment: str = "synthetic-l2"
    preset: str = "desk"
    m: int = 500
    n: int = 750
    d: int = 10
    sigma2: float = 0.1
    sparsity: float = 0.0
    center: bool = True
    bias_u: dict = field(default_factory=lambda: dict(_EXP_BIAS))
    bias_v: dict = field(default_factory=lambda: dict(_EXP_BIAS))
    channel: str = "poisson"
    denoiser: str = "l2"
    lambda_u: float = 1e-3
    lambda_v: float = 1e-3
    K_it: int = 10
    init_scale: float = 1.0
    gamma_normalizer: str = "m"
    instances: int = 3
    seed: int = 0
    N_mc: int = 10_000
    gd_steps: int = 0
    gd_lr: float = 0.1
    check_fixed_point: bool = False
    fixed_point_tol: float = 1e-10
    fixed_point_max_it: int = 5000
    fixed_point_lambda: float = None
    grid_points: int = 5
    grid_max: float = 8.0
    full_m: int = 1000
    full_n: int = 1163
    counts_path: str = None
    gt_iterations: int = 10
    centering: str = "column"
    rescale: str = "min_abs"
    workers: int = 1
    out: str = "results"

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for name in ("m", "n", "d", "K_it", "instances", "N_mc", "workers", "grid_points", "gt_iterations"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and not isinstance(v, bool) and v >= 1):
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not (self.d <= min(self.m, self.n)):
            raise ConfigError("d must not exceed min(m, n)")
        if self.channel not in ("poisson", "gaussian"):
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.centering not in ("column", "row"):
            raise ConfigError(f"centering must be 'column' or 'row', got {self.centering!r}")
        if self.rescale not in RESCALE_MODES:
            raise ConfigError(f"rescale must be one of {RESCALE_MODES}, got {self.rescale!r}")
        if self.gd_steps < 0:
            raise ConfigError("gd_steps must be nonnegative")
        if self.experiment == "real-resample" and self.counts_path is None:
            if self.m > self.full_m or self.n > self.full_n:
                raise ConfigError("subsample larger than the source matrix")
        if self.preset == "desk":
            sizes = [self.m * self.n]
            if self.experiment == "real-resample" and self.counts_path is None:
                sizes.append(self.full_m * self.full_n)
            if max(sizes) > DESK_MAX_ENTRIES:
                raise ConfigError(f"desk preset caps m*n at {DESK_MAX_ENTRIES:.3g}, got {max(sizes)}")
        try:
            self.prior().validate()
            self.denoiser_spec()
            if self.gamma_normalizer not in ("m", "paper"):
                raise ParameterError(f"unknown gamma_normalizer {self.gamma_normalizer!r}")
        except ParameterError as e:
            raise ConfigError(str(e)) from e
        if self.experiment == "synthetic-l1" and self.denoiser != "l1":
            raise ConfigError("synthetic-l1 needs the l1 denoiser")
        if self.gd_steps and self.denoiser != "l2":
            raise ConfigError("gradient descent runs only with the l2 denoiser")
        return self

    def prior(self):
        try:
            return PriorSpec(self.sigma2, self.sparsity, BiasPrior(**self.bias_u), BiasPrior(**self.bias_v), self.center)
        except TypeError as e:
            raise ConfigError(f"bad bias prior: {e}") from e

    def denoiser_spec(self):
        return DenoiserSpec(self.denoiser, self.lambda_u, self.lambda_v)

    def amp_config(self, init_seed, truth=None):
        return AmpConfig(K_it=self.K_it, denoiser=self.denoiser_spec(), init_seed=int(init_seed),
                         init_scale=self.init_scale, track_truth=truth, gamma_normalizer=self.gamma_normalizer)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        """sha256 of the canonical JSON of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, sets):
    """Apply ``key=value`` strings; dotted keys reach into dicts, values parse as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p!r} is not a mapping")
        node[parts[-1]] = _parse_value(value)
    return raw


def resolve_config(raw=None, sets=None):
    """Dataclass defaults, then the preset defaults of the chosen experiment, then ``raw``, then ``sets``."""
    raw = apply_overrides(raw or {}, sets)
    exp = raw.get("experiment", ExperimentConfig.experiment)
    preset = raw.get("preset", ExperimentConfig.preset)
    merged = {"bias_u": dict(_EXP_BIAS), "bias_v": dict(_EXP_BIAS), **PRESET_DEFAULTS.get((exp, preset), {})}
    for k, v in raw.items():
        if k in ("bias_u", "bias_v") and isinstance(v, dict) and isinstance(merged.get(k), dict) \
                and v.get("kind", merged[k]["kind"]) == merged[k]["kind"]:
            merged[k] = {**merged[k], **v}
        else:
            merged[k] = v
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**merged).validate()


def load_config(path=None, sets=None):
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    return resolve_config(raw, sets)


def instance_seeds(seed, index):
    """Integer seeds (model, counts, init, se, extra) for one instance."""
    child = np.random.SeedSequence(seed, spawn_key=(index,))
    return [int(x) for x in child.generate_state(5)]


# ---------------------------------------------------------------- trajectories

def amp_state_rows(states, evals=None, obs=None, bias=None, denoiser=None):
    """Per-iteration AMP summaries: metrics, Frobenius norms, flattened M/Q/F/Gamma."""
    rows = []
    for i, st in enumerate(states):
        row = dict(k=st.k)
        if evals is not None:
            e = evals[i]
            row.update(loss=e.loss, loss_normalized=e.loss_normalized, mse_M=e.mse_M,
                       overlap_a=e.overlap_a, overlap_b=e.overlap_b)
        if obs is not None:
            row["stationarity"] = stationarity_residual(st, obs, bias, denoiser)
        row.update(fro_A=float(np.linalg.norm(st.A_hat)), fro_B=float(np.linalg.norm(st.B_hat)))
        for name in ("M_a", "M_b"):
            if getattr(st, name) is not None:
                row.update(flatten(name, getattr(st, name)))
        for name in ("Q_a", "Q_b", "F_a", "F_b", "Gamma_a", "Gamma_b"):
            row.update(flatten(name, getattr(st, name)))
        rows.append(row)
    return rows


def se_state_rows(states, edges=None):
    """Per-iteration SE predictions with flattened moments and conditional row MSE."""
    rows = []
    for st in states:
        met = se_metrics(st, edges)
        row = dict(k=st.k, loss_normalized=met["loss_normalized"], mse_M=met["mse_M"],
                   overlap_a=met["overlap_a"], overlap_b=met["overlap_b"],
                   row_mse_a=met["row_mse_a"], row_mse_b=met["row_mse_b"])
        for name, X in (("M_a", st.M_bar_a), ("M_b", st.M_bar_b), ("Q_a", st.Q_bar_a), ("Q_b", st.Q_bar_b),
                        ("F_a", st.F_bar_a), ("F_b", st.F_bar_b), ("Gamma_a", st.Gamma_bar_a),
                        ("Gamma_b", st.Gamma_bar_b)):
            row.update(flatten(name, X))
        for b, v in enumerate(met["conditional_mse"]):
            row[f"cond_mse_bin{b}"] = float(v)
        rows.append(row)
    return rows


# ---------------------------------------------------------------- instances

def _observe(model, cfg, seed):
    if cfg.channel == "gaussian":
        return sample_gaussian_surrogate(model, seed)
    counts = sample_counts(model, seed)
    return build_scaled_observation(counts, estimate_bias(counts))


def _amp_vs_se(cfg, model, obs, s_init, s_se, empirical=False):
    """AMP on one observation and the SE matched to its initialization."""
    den = cfg.denoiser_spec()
    amp_cfg = cfg.amp_config(s_init, truth=model)
    states = run_amp(obs, cfg=amp_cfg)
    evals = evaluate_states(states, obs, den, model)
    se_cfg = se_config_for_instance(model, cfg.prior(), amp_cfg, states[0].B_hat, N_mc=cfg.N_mc,
                                    seed=s_se, empirical=empirical)
    se_states = run_se(se_cfg)
    traj = []
    for e, s in zip(evals, se_states):
        met = se_metrics(s)
        traj.append(dict(k=e.k, amp_loss=e.loss, amp_loss_normalized=e.loss_normalized, amp_mse=e.mse_M,
                         amp_overlap_a=e.overlap_a, amp_overlap_b=e.overlap_b,
                         se_loss_normalized=met["loss_normalized"], se_mse=met["mse_M"],
                         se_overlap_a=met["overlap_a"], se_overlap_b=met["overlap_b"]))
    tables = dict(trajectory=traj, amp_state=amp_state_rows(states, evals), se_state=se_state_rows(se_states))
    return states, se_states, evals, tables


def _summary(cfg, model, obs, states, evals, s_extra):
    den = cfg.denoiser_spec()
    row = dict(row=0, amp_final_loss_normalized=evals[-1].loss_normalized, amp_final_mse=evals[-1].mse_M)
    if cfg.gd_steps:
        m = obs.m
        res = gradient_descent(obs, obs.bias, den, steps=cfg.gd_steps, lr=cfg.gd_lr,
                               A0=np.zeros((m, cfg.d)), B0=states[0].B_hat, d=cfg.d, seed=s_extra)
        loss_true = quadratic_loss(model.A, model.B, obs, den)
        row.update(gd_iterations=res.iterations, gd_loss_normalized=res.loss / loss_true,
                   gd_mse=normalized_m_mse(model.A, model.B, res.A_hat, res.B_hat))
    if cfg.check_fixed_point:
        # Small lambda leaves a nearly flat rescaling direction that AMP crawls along,
        # so the fixed-point check may use its own weight.
        fp_cfg = cfg if cfg.fixed_point_lambda is None else replace(
            cfg, lambda_u=cfg.fixed_point_lambda, lambda_v=cfg.fixed_point_lambda)
        fp, ok = run_until_converged(obs, fp_cfg.amp_config(s_extra), tol=cfg.fixed_point_tol,
                                     max_it=cfg.fixed_point_max_it, d=cfg.d)
        res = stationarity_residual(fp[-1], obs, denoiser=fp_cfg.denoiser_spec())
        row.update(fp_converged=int(ok), fp_iterations=len(fp), fp_residual=res,
                   fp_residual_rel=res / float(np.linalg.norm(obs.Y_tilde)))
    return [row]


def run_synthetic_instance(cfg, index):
    s_model, s_obs, s_init, s_se, s_extra = instance_seeds(cfg.seed, index)
    model = generate_ground_truth(cfg.prior(), cfg.m, cfg.n, cfg.d, s_model)
    obs = _observe(model, cfg, s_obs)
    states, _, evals, tables = _amp_vs_se(cfg, model, obs, s_init, s_se)
    tables["summary"] = _summary(cfg, model, obs, states, evals, s_extra)
    return tables


def _unscale(X, rate):
    return X / np.sqrt(rate)[:, None]


def run_delta_instance(cfg, index, max_pairs_rows=2000):
    """Per-decile M-MSE in Delta_ij for AMP, the spectral estimate and SE."""
    s_model, s_obs, s_init, s_se, s_extra = instance_seeds(cfg.seed, index)
    model = generate_ground_truth(cfg.prior(), cfg.m, cfg.n, cfg.d, s_model)
    obs = _observe(model, cfg, s_obs)
    states, se_states, evals, tables = _amp_vs_se(cfg, model, obs, s_init, s_se)
    amp, se_last = states[-1], se_states[-1]
    b = obs.bias
    du, dv = 1.0 / model.r_u, 1.0 / model.r_v
    U, V = model.U, model.V
    edges = decile_edges(np.outer(du, dv))
    _, amp_bins, cnt = binned_m_mse(U, V, _unscale(amp.A_hat, b.rate_u), _unscale(amp.B_hat, b.rate_v), du, dv, edges)
    spec = spectral_estimate(obs, cfg.d)
    _, spec_bins, _ = binned_m_mse(U, V, _unscale(spec.A_hat, b.rate_u), _unscale(spec.B_hat, b.rate_v), du, dv, edges)
    At, Ah, Ru = se_last.ens_a
    Bt, Bh, Rv = se_last.ens_b
    na, nb = min(max_pairs_rows, At.shape[0]), min(max_pairs_rows, Bt.shape[0])
    _, se_bins, _ = binned_m_mse(_unscale(At[:na], Ru[:na]), _unscale(Bt[:nb], Rv[:nb]),
                                 _unscale(Ah[:na], Ru[:na]), _unscale(Bh[:nb], Rv[:nb]),
                                 1.0 / Ru[:na], 1.0 / Rv[:nb], edges)
    cov = prior_covariance(cfg.prior(), cfg.d)
    dc = delta_critical(cov, cov, cfg.m / cfg.n)
    rows = []
    for i in range(len(edges) - 1):
        rows.append(dict(bin=i, delta_lo=float(edges[i]), delta_hi=float(edges[i + 1]),
                         delta_mid=float(np.sqrt(edges[i] * edges[i + 1])), count=int(cnt[i]),
                         amp_mse=float(amp_bins[i]), spectral_mse=float(spec_bins[i]), se_mse=float(se_bins[i]),
                         delta_critical=dc))
    tables["bins"] = rows
    tables["summary"] = [dict(row=0, amp_mse=evals[-1].mse_M,
                              spectral_mse=normalized_m_mse(model.A, model.B, spec.A_hat, spec.B_hat),
                              delta_critical=dc)]
    return tables


def sweep_grid(cfg):
    pts = np.linspace(0.0, cfg.grid_max, cfg.grid_points)
    return [(float(u), float(v)) for u in pts for v in pts]


def run_sweep_instance(cfg, index):
    s_model = instance_seeds(cfg.seed, index)[0]
    reports = singular_sweep(cfg.prior(), cfg.m, cfg.n, cfg.d, sweep_grid(cfg), s_model)
    rows = []
    for p, rep in enumerate(reports):
        row = dict(point=p, **rep.row())
        row["converged"] = int(rep.converged)
        rows.append(row)
    return dict(sweep=rows)


# ---------------------------------------------------------------- real-data resample

@dataclass
class ResampleSource:
    """Ground-truth factors (unscaled) and log-biases recovered from a full count matrix."""

    U0: np.ndarray
    V0: np.ndarray
    s_u: np.ndarray
    s_v: np.ndarray


def _center(X, mode):
    if mode == "column":
        return X - X.mean(axis=0)
    return X - X.mean(axis=1, keepdims=True)


def _rescale(X, mode):
    if mode == "none":
        return X
    if mode == "min_value":
        lo = X.min()
        if not lo < 0:
            raise ParameterError("min_value rescale needs a negative entry; center the factor first")
        return X / lo
    nz = np.abs(X[X != 0])
    if nz.size == 0:
        raise ParameterError("cannot rescale an all-zero factor")
    return X / nz.min()


def resample_source(counts, d, cfg, init_seed):
    """AMP on the full counts, then centering and rescaling of the factors.

    The factors are returned unscaled (rows divided by sqrt of the fitted rates)
    together with the fitted log-rates, which act as the true biases.
    """
    bias = estimate_bias(counts)
    obs = build_scaled_observation(counts, bias)
    amp_cfg = AmpConfig(K_it=cfg.gt_iterations, denoiser=DenoiserSpec("l2", cfg.lambda_u, cfg.lambda_v),
                        init_seed=int(init_seed), init_scale=cfg.init_scale, gamma_normalizer=cfg.gamma_normalizer)
    last = run_amp(obs, cfg=amp_cfg, d=d)[-1]
    U0 = _center(_unscale(last.A_hat, bias.rate_u), cfg.centering)
    V0 = _center(_unscale(last.B_next, bias.rate_v), cfg.centering)
    U0, V0 = _rescale(U0, cfg.rescale), _rescale(V0, cfg.rescale)
    return ResampleSource(U0, V0, np.log(bias.rate_u), np.log(bias.rate_v))


def subsample_model(src, sub_m, sub_n, seed, center=True):
    """Rows drawn uniformly without replacement, normalized, optionally r-weighted centered."""
    rng = np.random.default_rng(seed)
    iu = np.sort(rng.choice(src.U0.shape[0], sub_m, replace=False))
    iv = np.sort(rng.choice(src.V0.shape[0], sub_n, replace=False))
    model = normalize(GroundTruthModel(src.U0[iu], src.V0[iv], src.s_u[iu], src.s_v[iv], 1.0, seed))
    if center:
        model = replace(model, U=center_embeddings(model.U, model.r_u), V=center_embeddings(model.V, model.r_v))
    return model


def source_counts(cfg):
    """The full count matrix: read from ``counts_path`` or drawn from a synthetic Zipf model."""
    if cfg.counts_path is not None:
        from .io import read_counts

        return read_counts(cfg.counts_path)
    child = np.random.SeedSequence(cfg.seed, spawn_key=(2**31,))
    s_model, s_counts, _ = (int(x) for x in child.generate_state(3))
    model = generate_ground_truth(cfg.prior(), cfg.full_m, cfg.full_n, cfg.d, s_model)
    return sample_counts(model, s_counts)


def source_init_seed(cfg):
    return int(np.random.SeedSequence(cfg.seed, spawn_key=(2**31 + 1,)).generate_state(1)[0])


def run_resample_instance(cfg, index, src):
    s_model, s_obs, s_init, s_se, s_extra = instance_seeds(cfg.seed, index)
    model = subsample_model(src, cfg.m, cfg.n, s_model, cfg.center)
    obs = _observe(model, cfg, s_obs)
    states, _, evals, tables = _amp_vs_se(cfg, model, obs, s_init, s_se, empirical=True)
    tables["summary"] = _summary(cfg, model, obs, states, evals, s_extra)
    return tables


def real_resample_protocol(counts, d, sub_m, sub_n, cfg):
    """Run the full protocol on ``counts``; returns the bundle path."""
    cfg = replace(cfg, experiment="real-resample", d=d, m=sub_m, n=sub_n)
    if sub_m > counts.shape[0] or sub_n > counts.shape[1]:
        raise ParameterError("subsample larger than the count matrix")
    return run_experiment(cfg, counts=counts)


# ---------------------------------------------------------------- orchestration

def _run_instance(cfg, index, src=None):
    if cfg.experiment in ("synthetic-l2", "synthetic-l1"):
        return run_synthetic_instance(cfg, index)
    if cfg.experiment == "delta-scatter":
        return run_delta_instance(cfg, index)
    if cfg.experiment == "singular-sweep":
        return run_sweep_instance(cfg, index)
    return run_resample_instance(cfg, index, src)


def _safe_instance(args):
    cfg, index, src = args
    try:
        return index, _run_instance(cfg, index, src), None
    except ArtifactError as e:
        return index, None, f"{type(e).__name__}: {e}"


def _versions():
    return dict(python=platform.python_version(), numpy=np.__version__, scipy=scipy.__version__,
                biasedamp=__version__)


def run_experiment(cfg, counts=None):
    """Run all instances, write per-instance tables, aggregates, plots and the manifest."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    src = None
    if cfg.experiment == "real-resample":
        counts = source_counts(cfg) if counts is None else counts
        src = resample_source(counts, cfg.d, cfg, source_init_seed(cfg))
    jobs = [(cfg, i, src) for i in range(cfg.instances)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_safe_instance, jobs))
    else:
        results = [_safe_instance(j) for j in jobs]
    status = []
    ok_tables = []
    for index, tables, err in results:
        if err is not None:
            log.error("instance %d failed: %s", index, err)
            status.append(dict(index=index, status="failed", error=err))
            continue
        d = out / "instances" / f"{index:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            write_rows(d / f"{name}.csv", rows)
        status.append(dict(index=index, status="ok"))
        ok_tables.append(tables)
    ok = [s["index"] for s in status if s["status"] == "ok"]
    agg_dir = out / "aggregate"
    agg_dir.mkdir(exist_ok=True)
    if ok_tables:
        for name in ok_tables[0]:
            write_rows(agg_dir / f"{name}.csv", aggregate_tables([t[name] for t in ok_tables]))
    manifest = dict(config=cfg.to_dict(), config_hash=cfg.hash(), versions=_versions(),
                    seeds={str(i): instance_seeds(cfg.seed, i) for i in range(cfg.instances)},
                    instances=status, excluded=[s["index"] for s in status if s["status"] != "ok"],
                    aggregated=ok)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if ok_tables:
        make_plots(out, cfg.experiment)
    return out


# ---------------------------------------------------------------- aggregation

def _to_float(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


def aggregate_tables(tables):
    """Row-wise mean and sample std across instances; the first column is the key."""
    tables = [[{k: _to_float(v) for k, v in r.items()} for r in t] for t in tables]
    n_rows = len(tables[0])
    if any(len(t) != n_rows for t in tables):
        raise ArtifactError("instances disagree on table length")
    key = next(iter(tables[0][0]))
    cols = [c for c in tables[0][0] if c != key]
    out = []
    for i in range(n_rows):
        keys = {t[i][key] for t in tables}
        if len(keys) != 1:
            raise ArtifactError(f"instances disagree on key {key} at row {i}")
        row = {key: int(tables[0][i][key]), "n": len(tables)}
        for c in cols:
            vals = np.array([t[i].get(c, np.nan) for t in tables])
            row[f"{c}_mean"] = float(np.mean(vals))
            row[f"{c}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
        out.append(row)
    return out


def verify_aggregate(directory, rtol=1e-12):
    """Recompute every aggregate table from the instance files; returns a list of mismatches."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    ok = manifest["aggregated"]
    problems = []
    for agg_path in sorted((d / "aggregate").glob("*.csv")):
        name = agg_path.stem
        tables = [read_rows(d / "instances" / f"{i:03d}" / f"{name}.csv") for i in ok]
        expect = aggregate_tables(tables)
        got = read_rows(agg_path)
        if len(got) != len(expect):
            problems.append(f"{name}: {len(got)} rows, expected {len(expect)}")
            continue
        for i, (g, e) in enumerate(zip(got, expect)):
            for c, v in e.items():
                a, b = _to_float(g.get(c)), float(v)
                if np.isnan(a) and np.isnan(b):
                    continue
                if not np.isclose(a, b, rtol=rtol, atol=0.0):
                    problems.append(f"{name} row {i} column {c}: file {a!r}, recomputed {b!r}")
    if sorted(ok) != sorted(s["index"] for s in manifest["instances"] if s["status"] == "ok"):
        problems.append("manifest aggregated list does not match instance status")
    return problems


# ---------------------------------------------------------------- plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def svg_plot(path, series, title="", xlabel="", ylabel="", logx=False, logy=False, hlines=(), vlines=()):
    """Minimal line/scatter SVG. ``series`` holds (label, xs, ys, style) with style 'line' or 'points'."""
    W, H, L, R, T, B = 640, 420, 70, 170, 40, 55
    xs_all = np.concatenate([np.asarray(s[1], float) for s in series] + [np.asarray(vlines, float)])
    ys_all = np.concatenate([np.asarray(s[2], float) for s in series] + [np.asarray(hlines, float)])
    tx = (lambda x: np.log10(x)) if logx else (lambda x: x)  # noqa: E731
    ty = (lambda y: np.log10(y)) if logy else (lambda y: y)  # noqa: E731
    with np.errstate(divide="ignore", invalid="ignore"):
        fx, fy = tx(xs_all), ty(ys_all)
    fx, fy = fx[np.isfinite(fx)], fy[np.isfinite(fy)]
    x0, x1 = (fx.min(), fx.max()) if fx.size else (0.0, 1.0)
    y0, y1 = (fy.min(), fy.max()) if fy.size else (0.0, 1.0)
    x1, y1 = (x1 if x1 > x0 else x0 + 1), (y1 if y1 > y0 else y0 + 1)
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return L + (tx(x) - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - (ty(y) - y0) / (y1 - y0) * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
           f'<text x="{(W - R + L) / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="{(W - R + L) / 2}" y="{H - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="16" y="{(H - B + T) / 2}" text-anchor="middle" transform="rotate(-90 16 {(H - B + T) / 2})">{ylabel}</text>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        xl = f"1e{xv:.1f}" if logx else f"{xv:.3g}"
        yl = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
        xp = L + t * (W - L - R)
        yp = H - B - t * (H - T - B)
        out.append(f'<text x="{xp:.1f}" y="{H - B + 16}" text-anchor="middle">{xl}</text>')
        out.append(f'<text x="{L - 6}" y="{yp + 4:.1f}" text-anchor="end">{yl}</text>')
    with np.errstate(divide="ignore", invalid="ignore"):
        for h in hlines:
            out.append(f'<line x1="{L}" y1="{py(h):.1f}" x2="{W - R}" y2="{py(h):.1f}" stroke="gray" stroke-dasharray="4 3"/>')
        for v in vlines:
            out.append(f'<line x1="{px(v):.1f}" y1="{T}" x2="{px(v):.1f}" y2="{H - B}" stroke="gray" stroke-dasharray="4 3"/>')
        for i, (label, xs, ys, style) in enumerate(series):
            c = _COLORS[i % len(_COLORS)]
            pts = [(px(x), py(y)) for x, y in zip(np.asarray(xs, float), np.asarray(ys, float))]
            pts = [(a, b) for a, b in pts if np.isfinite(a) and np.isfinite(b)]
            if style == "line" and pts:
                coords = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
                out.append(f'<polyline points="{coords}" fill="none" stroke="{c}" stroke-width="2"/>')
            for a, b in pts:
                out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{c}"/>')
            ly = T + 10 + 18 * i
            out.append(f'<rect x="{W - R + 12}" y="{ly - 8}" width="12" height="12" fill="{c}"/>')
            out.append(f'<text x="{W - R + 30}" y="{ly + 2}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _col(rows, name):
    return np.array([_to_float(r[name]) for r in rows])


def make_plots(directory, experiment):
    """Draw the figure panels of a bundle from its aggregate CSVs."""
    d = Path(directory)
    agg = d / "aggregate"
    plots = d / "plots"
    plots.mkdir(exist_ok=True)
    if experiment in ("synthetic-l2", "synthetic-l1", "real-resample"):
        rows = read_rows(agg / "trajectory.csv")
        k = _col(rows, "k") + 1
        summ = read_rows(agg / "summary.csv") if (agg / "summary.csv").exists() else []
        for metric, label, gd in (("loss_normalized", "normalized loss", "gd_loss_normalized_mean"),
                                  ("mse", "normalized M-MSE", "gd_mse_mean")):
            series = [("AMP", k, _col(rows, f"amp_{metric}_mean"), "line"),
                      ("SE", k, _col(rows, f"se_{metric}_mean"), "line")]
            if summ and gd in summ[0]:
                series.append(("GD (final)", [k[-1]], [_to_float(summ[0][gd])], "points"))
            svg_plot(plots / f"{metric}.svg", series, title=f"{label} vs iteration", xlabel="iteration",
                     ylabel=label, logy=metric == "mse")
    elif experiment == "delta-scatter":
        rows = read_rows(agg / "bins.csv")
        x = _col(rows, "delta_mid_mean")
        series = [(name, x, _col(rows, f"{col}_mean"), "line")
                  for name, col in (("AMP", "amp_mse"), ("spectral", "spectral_mse"), ("SE", "se_mse"))]
        svg_plot(plots / "delta_mse.svg", series, title="M-MSE vs inverse Fisher information",
                 xlabel="Delta (decile centre)", ylabel="normalized M-MSE", logx=True, logy=True)
    elif experiment == "singular-sweep":
        rows = read_rows(agg / "sweep.csv")
        x = _col(rows, "delta_mean")
        series = [(name, x, _col(rows, f"{col}_mean"), "points")
                  for name, col in (("sigma_1", "sigma1"), ("sigma_d", "sigma_d"), ("sigma_d+1", "sigma_d1"))]
        svg_plot(plots / "singular.svg", series, title="top singular values of Y~/sqrt(n)", xlabel="Delta",
                 ylabel="singular value", logx=True, hlines=[_col(rows, "bulk_edge_mean")[0]],
                 vlines=[_col(rows, "delta_critical_mean")[0]])
