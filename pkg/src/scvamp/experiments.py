"""Experiment configurations and pipelines behind the command-line tool.

Each pipeline takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding the per-iteration trace rows, a summary
dictionary and any extra tables.  Writing files is left to
:mod:`scvamp.cli`.

SNR convention
--------------
``snr_convention: measurement`` (default) fixes the noise variance from the
average power per measurement,

    noise_var = E||A x||^2 / (M 10^(SNR/10)) = sum(d^2) * prior_var / (M 10^(SNR/10)),

so a unit-spectrum ``A`` with ``M <= N`` gives ``prior_var / 10^(SNR/10)``
whatever the aspect ratio.  ``snr_convention: component`` uses the
per-component signal power ``sigma_x^2 / 10^(SNR/10)`` instead (for the
Bernoulli-Gaussian prior that is the slab variance, not ``rho sigma_x^2``).
"""

from __future__ import annotations

import copy
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import error_decoupling_report
from .dsm import (DsmConfig, LearnedPairScore, TrainingDiverged, WeightFileError,
                  load_weights, relative_score_error, train_dsm)
from .langevin import (LangevinConfig, LangevinLikelihoodScore, make_forward_model)
from .message_passing import (TRACE_COLUMNS, ProblemBatch, ScVampConfig,
                              ScVampDivergence, run_scvamp)
from .numerics import RngStream, SensingMatrix, build_rri_matrix
from .score_models import (BernoulliGaussianPrior, GaussianPrior,
                           LinearGaussianLikelihood, PairwiseGaussianPrior)
from .siso import SisoConfig
from .state_evolution import (MmseFunction, bg_mmse, exit_curves, gaussian_mmse,
                              linear_mmse, run_se, scalar_gaussian_fixed_point,
                              score_model_mmse)

__all__ = [
    "EXPERIMENT_KINDS",
    "SNR_CONVENTIONS",
    "TRACE_FIELDS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "ExperimentFailed",
    "noise_variance",
    "make_prior",
    "make_linear_problem",
    "decoupling_errors",
    "run_experiment",
    "score_report",
]

EXPERIMENT_KINDS = ("scalar-gaussian", "linear-bg", "correlated-learned",
                    "langevin-demo", "se-only", "exit", "diagnostics")
SNR_CONVENTIONS = ("measurement", "component")
TRACE_FIELDS = TRACE_COLUMNS[:-1] + ("mse_se", "clip_events")

PRIOR_DEFAULTS = {
    "gaussian": {"power": 1.0},
    "bernoulli-gaussian": {"rho": 0.1, "var": 1.0},
    "pairwise-gaussian": {"var": 1.0, "xi": 0.9},
}

# Per-kind overrides of the flat defaults below.
KIND_DEFAULTS = {
    "scalar-gaussian": {"n": 1, "m": 1, "batch": 10_000, "iterations": 5,
                        "prior": {"kind": "gaussian", "power": 1.0},
                        "noise_var": 0.25},
    "linear-bg": {},
    "correlated-learned": {"batch": 1000,
                           "prior": {"kind": "pairwise-gaussian"},
                           "stein_calibration": True},
    "langevin-demo": {"n": 64, "m": 32, "batch": 8, "iterations": 8, "snr_db": 10.0,
                      "prior": {"kind": "gaussian"},
                      "langevin": {"step_scale": 0.2, "steps": 2000, "burn_in": 1000}},
    "se-only": {"iterations": 20},
    "exit": {"n": 1, "m": 1, "prior": {"kind": "gaussian", "power": 1.0},
             "noise_var": 0.25},
    "diagnostics": {"iterations": 3},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class ExperimentFailed(RuntimeError):
    """Pipeline failure; ``result`` holds whatever was computed."""

    def __init__(self, message, result: "ExperimentResult"):
        super().__init__(message)
        self.result = result


@dataclass
class ExperimentConfig:
    """Flat experiment description with nested dictionaries for the
    prior, score training, Langevin sampler, forward model and EXIT grid.

    ``v_init=None`` starts from the prior variance; ``noise_var=None``
    derives the noise level from ``snr_db``.
    """

    kind: str = "linear-bg"
    n: int = 2000
    m: int = 1000
    batch: int = 200
    iterations: int = 10
    seed: int = 0
    snr_db: float = 20.0
    snr_convention: str = "measurement"
    noise_var: float | None = None
    singular_values: str = "unit"
    prior: dict = field(default_factory=lambda: {"kind": "bernoulli-gaussian"})
    v_init: float | None = None
    damping: float = 1.0
    stop_tolerance: float = 1e-8
    fisher: str = "minibatch"
    fisher_batch: int | None = None
    stein_calibration: bool = False
    score: str = "learned"
    weights: str | None = None
    dsm: dict = field(default_factory=dict)
    se_batch: int = 100
    langevin: dict = field(default_factory=dict)
    forward: dict = field(default_factory=lambda: {"kind": "tanh"})
    diagnostic_iteration: int = 3
    lags: int = 5
    exit_grid: dict = field(default_factory=lambda: {"min": 1e-3, "max": 10.0,
                                                      "points": 50})

    @classmethod
    def from_dict(cls, data: dict | None, kind: str | None = None) -> "ExperimentConfig":
        data = dict(data or {})
        kind = kind or data.get("kind", cls.kind)
        if kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind: unknown experiment {kind!r}; "
                              f"choose from {', '.join(EXPERIMENT_KINDS)}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        merged = copy.deepcopy(KIND_DEFAULTS[kind])
        for key, val in data.items():
            if isinstance(val, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **val}
            else:
                merged[key] = val
        merged["kind"] = kind
        cfg = cls()
        for f in dataclasses.fields(cls):
            if f.name in merged:
                setattr(cfg, f.name, _coerce(f.name, merged[f.name], getattr(cfg, f.name)))
        cfg.prior = {**PRIOR_DEFAULTS.get(cfg.prior.get("kind"), {}), **cfg.prior}
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        for name in ("n", "m", "batch", "se_batch", "lags"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        if self.iterations < 0:
            raise ConfigError("iterations: must be >= 0")
        if self.snr_convention not in SNR_CONVENTIONS:
            raise ConfigError(f"snr_convention: expected one of {SNR_CONVENTIONS}")
        if self.noise_var is not None and not self.noise_var > 0:
            raise ConfigError("noise_var: must be positive")
        if self.prior.get("kind") not in PRIOR_DEFAULTS:
            raise ConfigError(f"prior.kind: expected one of {sorted(PRIOR_DEFAULTS)}")
        if self.singular_values != "unit":
            raise ConfigError("singular_values: only 'unit' is supported")
        if self.fisher not in ("minibatch", "analytic"):
            raise ConfigError("fisher: expected 'minibatch' or 'analytic'")
        if self.score not in ("learned", "analytic"):
            raise ConfigError("score: expected 'learned' or 'analytic'")
        if self.v_init is not None and not self.v_init > 0:
            raise ConfigError("v_init: must be positive")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping: must lie in (0, 1]")
        if self.diagnostic_iteration < 1:
            raise ConfigError("diagnostic_iteration: must be >= 1")
        if self.prior["kind"] == "pairwise-gaussian" and self.n % 2:
            raise ConfigError("n: the pairwise prior needs an even dimension")
        try:
            make_prior(self.prior)
            DsmConfig(**_dsm_kwargs(self.dsm))
            LangevinConfig(**self.langevin)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid sub-configuration: {exc}") from exc


def _coerce(name, value, default):
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int) and name not in ("noise_var", "v_init"):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float) or name in ("noise_var", "v_init"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise TypeError
            return dict(value)
        if isinstance(default, str) or name in ("weights", "fisher_batch"):
            if name == "fisher_batch":
                return int(value)
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} "
                          f"(expected {type(default).__name__})") from None
    return value


def _dsm_kwargs(d: dict) -> dict:
    out = dict(d)
    if "arch" in out:
        out["arch"] = tuple(out["arch"])
    return out


@dataclass
class ExperimentResult:
    kind: str
    trace: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    documents: dict = field(default_factory=dict)
    weights: object = None


def make_prior(spec: dict):
    kind = spec.get("kind")
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "gaussian":
        return GaussianPrior(**args)
    if kind == "bernoulli-gaussian":
        return BernoulliGaussianPrior(**args)
    if kind == "pairwise-gaussian":
        return PairwiseGaussianPrior(**args)
    raise ValueError(f"unknown prior kind {kind!r}")


def _slab_variance(prior) -> float:
    if isinstance(prior, BernoulliGaussianPrior):
        return prior.params.var
    return prior.prior_variance()


def noise_variance(snr_db: float, singular_values, m: int, prior,
                   convention: str = "measurement") -> float:
    """Noise variance for a target SNR in dB (see the module docstring)."""
    scale = 10.0 ** (snr_db / 10.0)
    if convention == "measurement":
        d = np.asarray(singular_values, dtype=float)
        return float(np.sum(d * d)) * prior.prior_variance() / (m * scale)
    if convention == "component":
        return _slab_variance(prior) / scale
    raise ValueError(f"unknown SNR convention {convention!r}")


def make_linear_problem(rng: RngStream, n: int, m: int, prior, batch: int,
                        snr_db: float, convention: str = "measurement",
                        noise_var: float | None = None):
    """Unit-spectrum RRI matrix, prior draws and noisy measurements.

    Returns ``(A, x, y, noise_var)`` with ``x`` of shape ``(batch, n)``.
    """
    a = build_rri_matrix(rng.split("matrix"), m, n, np.ones(min(m, n)))
    if noise_var is None:
        noise_var = noise_variance(snr_db, a.d, m, prior, convention)
    x = prior.sample_prior(rng.split("signal"), (batch, n))
    y = a.apply(x) + math.sqrt(noise_var) * rng.split("noise").standard_normal((batch, m))
    return a, x, y, noise_var


def _scvamp_config(cfg: ExperimentConfig, prior, calibrate_b: bool,
                   fisher_b: str | None = None) -> ScVampConfig:
    v_init = cfg.v_init if cfg.v_init is not None else prior.prior_variance()
    return ScVampConfig(
        max_iterations=cfg.iterations, v_init=v_init, damping=cfg.damping,
        stop_tolerance=cfg.stop_tolerance,
        siso_a=SisoConfig(fisher=cfg.fisher, batch_size=cfg.fisher_batch),
        siso_b=SisoConfig(fisher=fisher_b or cfg.fisher, batch_size=cfg.fisher_batch,
                          stein_calibration=calibrate_b))


def _merge_trace(run_trace, se_trace) -> list:
    se_by_iter = {r.iter: r.predicted_mse for r in se_trace.rows} if se_trace else {}
    rows = []
    for row in run_trace.rows:
        d = dataclasses.asdict(row)
        d["mse_se"] = se_by_iter.get(row.iter, math.nan)
        rows.append({k: d[k] for k in TRACE_FIELDS})
    return rows


def _se_rows(se_trace) -> list:
    rows = []
    for r in se_trace.rows:
        d = {k: math.nan for k in TRACE_FIELDS}
        d.update(iter=r.iter, v_in_A=r.v_in_A, v_out_A=r.v_out_A, v_in_B=r.v_in_B,
                 v_out_B=r.v_out_B, alpha_A=r.alpha_A, alpha_B=r.alpha_B,
                 mse_se=r.predicted_mse, clip_events=0)
        rows.append(d)
    return rows


def _final(rows, key):
    vals = [r[key] for r in rows if r["iter"] > 0]
    return vals[-1] if vals else math.nan


def _run(cfg, module_a, module_b, batch, scv, se, result, on_iteration=None):
    try:
        est, trace = run_scvamp(scv, module_a, module_b, batch, on_iteration)
    except ScVampDivergence as exc:
        result.trace = _merge_trace(exc.trace, se)
        result.summary["events"] = exc.trace.events
        raise ExperimentFailed(str(exc), result) from exc
    result.trace = _merge_trace(trace, se)
    result.summary.update(
        iterations_run=len(trace.rows) - 1,
        converged=trace.converged,
        final_mse=_final(result.trace, "mse_actual"),
        final_mse_se=_final(result.trace, "mse_se"),
        events=trace.events,
    )
    return est, trace


def _scalar_gaussian(cfg: ExperimentConfig, rng: RngStream, result):
    prior = make_prior(cfg.prior)
    if not isinstance(prior, GaussianPrior):
        raise ConfigError("prior.kind: scalar-gaussian needs a gaussian prior")
    p = prior.prior_variance()
    sigma2 = cfg.noise_var if cfg.noise_var is not None else p / 10 ** (cfg.snr_db / 10)
    a = SensingMatrix(np.eye(1), np.ones(1), np.eye(1))
    x = prior.sample_prior(rng.split("signal"), (cfg.batch, 1))
    y = x + math.sqrt(sigma2) * rng.split("noise").standard_normal((cfg.batch, 1))
    scv = _scvamp_config(cfg, prior, False)
    se = run_se(scv, gaussian_mmse(sigma2, "likelihood"), gaussian_mmse(p, "prior"))
    est, _ = _run(cfg, LinearGaussianLikelihood(a, sigma2), prior,
                  ProblemBatch(1, y=y, truth=x), scv, se, result)
    fp = scalar_gaussian_fixed_point(p, sigma2)
    wiener = p / (p + sigma2) * y
    result.summary.update(
        noise_var=sigma2, v_star=fp.v_star, se_v_star=fp.se_v_star,
        mutual_information_nats=fp.mutual_information_nats,
        wiener_mad=float(np.mean(np.abs(est - wiener))))


def _linear_bg(cfg, rng, result, on_iteration=None):
    prior = make_prior(cfg.prior)
    a, x, y, nv = make_linear_problem(rng, cfg.n, cfg.m, prior, cfg.batch, cfg.snr_db,
                                      cfg.snr_convention, cfg.noise_var)
    scv = _scvamp_config(cfg, prior, cfg.stein_calibration)
    mmse_b = (bg_mmse(prior.params) if isinstance(prior, BernoulliGaussianPrior)
              else _analytic_mmse(prior))
    se = run_se(scv, linear_mmse(a.d, cfg.n, nv), mmse_b)
    if isinstance(prior, BernoulliGaussianPrior) and cfg.fisher == "analytic":
        scv = dataclasses.replace(scv, siso_b=dataclasses.replace(scv.siso_b,
                                                                  fisher="minibatch"))
    result.summary["noise_var"] = nv
    _run(cfg, LinearGaussianLikelihood(a, nv), prior, ProblemBatch(cfg.n, y=y, truth=x),
         scv, se, result, on_iteration)
    return x


def _analytic_mmse(prior):
    return MmseFunction(prior.mmse, "closed-form", prior.kind)


def _learned_score(cfg, prior, rng, result):
    if cfg.weights:
        try:
            net = load_weights(cfg.weights)
        except OSError as exc:
            raise ConfigError(f"weights: cannot read {cfg.weights} ({exc.strerror})") from exc
        except WeightFileError as exc:
            raise ConfigError(f"weights: {exc}") from exc
        result.summary["weights"] = str(cfg.weights)
    else:
        dcfg = DsmConfig(**{"seed": cfg.seed, **_dsm_kwargs(cfg.dsm)})
        net, report = train_dsm(lambda r, c: prior.sample_prior(r, (c, 2)), dcfg)
        result.weights = net
        result.summary["training"] = {"final_loss": report.final_loss,
                                      "wall_clock": report.wall_clock,
                                      "checkpoints": report.checkpoints}
    return LearnedPairScore(net, prior=prior)


def _correlated(cfg, rng, result):
    prior = make_prior(cfg.prior)
    if not isinstance(prior, PairwiseGaussianPrior):
        raise ConfigError("prior.kind: correlated-learned needs the pairwise-gaussian prior")
    a, x, y, nv = make_linear_problem(rng, cfg.n, cfg.m, prior, cfg.batch, cfg.snr_db,
                                      cfg.snr_convention, cfg.noise_var)
    if cfg.score == "learned":
        module_b = _learned_score(cfg, prior, rng, result)
        mmse_b = score_model_mmse(module_b, cfg.n, cfg.se_batch, rng.split("se"),
                                  calibrate=cfg.stein_calibration,
                                  sampler=prior.sample_prior)
        fisher_b = "minibatch"
    else:
        module_b = prior
        mmse_b = _analytic_mmse(prior)
        fisher_b = None
    scv = _scvamp_config(cfg, prior, cfg.stein_calibration, fisher_b)
    se = run_se(scv, linear_mmse(a.d, cfg.n, nv), mmse_b)
    result.summary.update(noise_var=nv, score=cfg.score)
    _run(cfg, LinearGaussianLikelihood(a, nv), module_b,
         ProblemBatch(cfg.n, y=y, truth=x), scv, se, result)


def _langevin_demo(cfg, rng, result):
    prior = make_prior(cfg.prior)
    spec = dict(cfg.forward)
    kind = spec.pop("kind", "tanh")
    a_mat = build_rri_matrix(rng.split("matrix"), cfg.m, cfg.n, np.ones(min(cfg.m, cfg.n)))
    nv = cfg.noise_var
    if nv is None:
        nv = noise_variance(cfg.snr_db, a_mat.d, cfg.m, prior, cfg.snr_convention)
    dense = a_mat.dense()
    if kind == "linear":
        model = make_forward_model("linear", a=dense, noise_var=nv)
    else:
        model = make_forward_model(kind, a=dense, noise_var=nv, **spec)
    x = prior.sample_prior(rng.split("signal"), (cfg.batch, cfg.n))
    y = model.apply(x) + math.sqrt(nv) * rng.split("noise").standard_normal((cfg.batch, cfg.m))
    lang = LangevinConfig(**cfg.langevin)
    module_a = LangevinLikelihoodScore(model, lang, rng.split("langevin"))
    scv = _scvamp_config(cfg, prior, False, fisher_b="minibatch")
    scv = dataclasses.replace(scv, siso_a=SisoConfig(batch_size=cfg.fisher_batch))
    se = None
    if kind == "linear" and not isinstance(prior, BernoulliGaussianPrior):
        se = run_se(scv, linear_mmse(a_mat.d, cfg.n, nv), _analytic_mmse(prior))
    result.summary.update(noise_var=nv, forward=kind,
                          langevin=dataclasses.asdict(lang))
    _run(cfg, module_a, prior, ProblemBatch(cfg.n, y=y, truth=x), scv, se, result)


def _se_only(cfg, rng, result):
    prior = make_prior(cfg.prior)
    d = np.ones(min(cfg.m, cfg.n))
    nv = cfg.noise_var if cfg.noise_var is not None else noise_variance(
        cfg.snr_db, d, cfg.m, prior, cfg.snr_convention)
    scv = _scvamp_config(cfg, prior, False)
    mmse_b = (bg_mmse(prior.params) if isinstance(prior, BernoulliGaussianPrior)
              else _analytic_mmse(prior))
    se = run_se(scv, linear_mmse(d, cfg.n, nv), mmse_b)
    result.trace = _se_rows(se)
    result.summary.update(noise_var=nv, converged=se.converged,
                          final_mse_se=se.final.predicted_mse,
                          iterations_run=len(se.rows) - 1)


def _exit(cfg, rng, result):
    prior = make_prior(cfg.prior)
    d = np.ones(min(cfg.m, cfg.n))
    nv = cfg.noise_var if cfg.noise_var is not None else noise_variance(
        cfg.snr_db, d, cfg.m, prior, cfg.snr_convention)
    mmse_b = (bg_mmse(prior.params) if isinstance(prior, BernoulliGaussianPrior)
              else _analytic_mmse(prior))
    g = cfg.exit_grid
    grid = np.geomspace(float(g["min"]), float(g["max"]), int(g["points"]))
    chart = exit_curves(linear_mmse(d, cfg.n, nv), mmse_b, grid,
                        v_init=cfg.v_init or prior.prior_variance())
    scv = _scvamp_config(cfg, prior, False)
    se = run_se(dataclasses.replace(scv, max_iterations=max(cfg.iterations, 1)),
                linear_mmse(d, cfg.n, nv), mmse_b)
    result.trace = _se_rows(se)
    result.tables["exit_curves.csv"] = (("series", "v_in", "v_out"), chart.rows())
    va, vb = chart.limit
    result.summary.update(noise_var=nv, fixed_point_v_in_A=va, fixed_point_v_out_A=vb,
                          staircase_steps=len(chart.staircase))


def decoupling_errors(cfg: ExperimentConfig, rng: RngStream | None = None):
    """Module B input errors ``x_in_B - x`` at ``cfg.diagnostic_iteration``
    of the linear experiment described by ``cfg``.

    Returns ``(errors, v_claimed, result)``.
    """
    rng = rng or RngStream(cfg.seed)
    run_cfg = dataclasses.replace(cfg, iterations=cfg.diagnostic_iteration,
                                  stop_tolerance=0.0)
    captured = {}

    def grab(t, res_a, res_b):
        if t == cfg.diagnostic_iteration:
            captured["mean"] = res_a.extrinsic.mean.copy()
            captured["v"] = res_a.extrinsic.variance

    result = ExperimentResult(cfg.kind)
    x = _linear_bg(run_cfg, rng, result, grab)
    if "mean" not in captured:
        raise ExperimentFailed("run stopped before the diagnostic iteration", result)
    return captured["mean"] - x, captured["v"], result


def _diagnostics(cfg, rng, result):
    errors, v, inner = decoupling_errors(cfg, rng)
    result.trace = inner.trace
    result.summary.update(inner.summary)
    report = error_decoupling_report(errors, v, cfg.lags)
    result.documents["diagnostics.json"] = {
        "iteration": cfg.diagnostic_iteration, **report.as_dict()}
    result.summary["decoupling_passed"] = report.passed


PIPELINES = {
    "scalar-gaussian": _scalar_gaussian,
    "linear-bg": _linear_bg,
    "correlated-learned": _correlated,
    "langevin-demo": _langevin_demo,
    "se-only": _se_only,
    "exit": _exit,
    "diagnostics": _diagnostics,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run the pipeline for ``cfg.kind``; raises :class:`ExperimentFailed`
    with the partial result on numerical failure."""
    result = ExperimentResult(cfg.kind)
    start = time.perf_counter()
    rng = RngStream(cfg.seed)
    try:
        PIPELINES[cfg.kind](cfg, rng, result)
    except TrainingDiverged as exc:
        result.summary["training"] = {"iterations": exc.report.iterations,
                                      "checkpoints": exc.report.checkpoints}
        raise ExperimentFailed(f"score training diverged: {exc}", result) from exc
    finally:
        result.summary["wall_clock"] = time.perf_counter() - start
    return result


def score_report(net, prior, seed: int, count: int = 100_000):
    """Learned-versus-analytic relative score error for ``train-score``."""
    return relative_score_error(net, prior, lambda r, c: prior.sample_prior(r, (c, 2)),
                                RngStream(seed).split("holdout"), count=count)
