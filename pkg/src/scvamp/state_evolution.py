"""Scalar state evolution, EXIT transfer curves and Gaussian-channel capacity.

The recursion tracks only the message variances.  Each module is
summarised by its per-symbol MMSE function ``mmse(v)``; from it

    alpha = mmse(v) / v,   v_post = v * alpha,   v_out = v * alpha / (1 - alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .message_passing import ScVampConfig
from .numerics import RngStream
from .score_models import BernoulliGaussianParams, ScoreModel
from .siso import DEFAULT_CLIP, stein_calibration

__all__ = [
    "MmseFunction",
    "SeRow",
    "SeTrace",
    "FixedPointReport",
    "ExitChart",
    "se_step",
    "run_se",
    "scalar_gaussian_fixed_point",
    "mmse_bg",
    "mmse_from_score_model",
    "gaussian_mmse",
    "linear_mmse",
    "bg_mmse",
    "score_model_mmse",
    "exit_curves",
    "vector_gaussian_mi",
    "scalar_gaussian_mi",
]


@dataclass(frozen=True)
class MmseFunction:
    """Per-symbol MMSE ``v -> mmse(v)`` with a tag saying how it is computed."""

    evaluator: Callable[[float], float]
    kind: str = "closed-form"
    label: str = ""

    def __call__(self, v: float) -> float:
        return float(self.evaluator(v))


def gaussian_mmse(power: float, label: str = "gaussian") -> MmseFunction:
    """``v P / (v + P)``: Gaussian prior of power ``P``, or a scalar
    Gaussian likelihood of noise variance ``P``."""
    return MmseFunction(lambda v: v * power / (v + power), "closed-form", label)


def linear_mmse(singular_values, n: int, noise_var: float) -> MmseFunction:
    """Linear-Gaussian observation module from the spectrum of ``A``."""
    d2 = np.zeros(n)
    d = np.asarray(singular_values, dtype=float)
    d2[:d.size] = d ** 2

    def f(v):
        return float(np.sum(1.0 / (1.0 / v + d2 / noise_var))) / n

    return MmseFunction(f, "closed-form", "linear")


def _bg_terms(r, v, p: BernoulliGaussianParams):
    v0, v1 = v, p.var + v
    with np.errstate(divide="ignore"):
        lw0 = math.log1p(-p.rho) if p.rho < 1 else -math.inf
        lw1 = math.log(p.rho) if p.rho > 0 else -math.inf
    l0 = lw0 - 0.5 * np.log(2 * np.pi * v0) - 0.5 * r * r / v0
    l1 = lw1 - 0.5 * np.log(2 * np.pi * v1) - 0.5 * r * r / v1
    top = np.maximum(l0, l1)
    dens = np.exp(top) * (np.exp(l0 - top) + np.exp(l1 - top))
    pi1 = 1.0 / (1.0 + np.exp(l0 - l1))
    m1 = r * p.var / v1
    c1 = p.var * v / v1
    post_var = pi1 * c1 + pi1 * (1 - pi1) * m1 * m1
    return dens, post_var


def mmse_bg(v: float, p: BernoulliGaussianParams, budget: int = 200) -> float:
    """Per-symbol MMSE of ``r = x + N(0, v)`` under a Bernoulli-Gaussian prior.

    Integrates the posterior variance against the density of ``r`` (no
    cancellation between large terms).  The integrand is even, so only
    ``r >= 0`` is integrated, with adaptive quadrature split at the point
    where the two mixture branches have equal weight; ``budget`` bounds the
    number of adaptive subintervals.
    """
    if not v > 0:
        raise ValueError("variance must be positive")
    if p.rho == 0:
        return 0.0
    if p.rho == 1:
        return v * p.var / (v + p.var)
    v0, v1 = v, p.var + v
    # v1 - v0 is exactly the slab variance; subtracting would cancel for huge v
    arg = 2 * v0 * v1 / p.var * (math.log((1 - p.rho) / p.rho)
                                 + 0.5 * math.log1p(p.var / v0))
    rstar = math.sqrt(max(arg, 0.0))
    upper = 12.0 * math.sqrt(v1)
    points = sorted({q for q in (0.5 * rstar, rstar, 2 * rstar, 6 * math.sqrt(v0))
                     if 0 < q < upper})

    def integrand(r):
        dens, pv = _bg_terms(r, v, p)
        return 2.0 * dens * pv

    val, _ = integrate.quad(integrand, 0.0, upper, points=points or None,
                            limit=budget, epsabs=0.0, epsrel=1e-12)
    return val


def bg_mmse(p: BernoulliGaussianParams, budget: int = 200) -> MmseFunction:
    return MmseFunction(lambda v: mmse_bg(v, p, budget), "quadrature",
                        "bernoulli-gaussian")


def mmse_from_score_model(model: ScoreModel, v: float, n: int, batch: int,
                          rng: RngStream, calibrate: bool = True,
                          sampler: Callable | None = None) -> float:
    """Monte Carlo MSE of the (Stein-calibrated) Tweedie denoiser.

    Draws ``batch`` prior vectors of length ``n``, corrupts them with
    ``N(0, v I)`` and returns the per-symbol squared error.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    sampler = sampler or model.sample_prior
    x = sampler(rng, (batch, n))
    x_in = x + math.sqrt(v) * rng.standard_normal((batch, n))
    s = model.score(x_in, v)
    c = stein_calibration(x_in, s, n) if calibrate else 1.0
    err = x_in + v * c * s - x
    return float(np.sum(np.sum(err * err, axis=1)) / err.size)


def score_model_mmse(model: ScoreModel, n: int, batch: int, rng: RngStream,
                     calibrate: bool = True,
                     sampler: Callable | None = None) -> MmseFunction:
    """MmseFunction whose every evaluation draws from its own sub-stream,
    keyed by the variance, so repeated or reordered calls agree."""

    def f(v):
        return mmse_from_score_model(model, v, n, batch,
                                     rng.split(f"mmse:{float(v)!r}"),
                                     calibrate, sampler)

    return MmseFunction(f, f"monte-carlo(batch={batch})", model.kind)


def se_step(v_in: float, mmse: MmseFunction, clip=DEFAULT_CLIP):
    """One module of the variance recursion: ``(alpha, v_post, v_out)``."""
    if not v_in > 0:
        raise ValueError("input variance must be positive")
    lo, hi = clip
    alpha = min(max(mmse(v_in) / v_in, lo), hi)
    return alpha, v_in * alpha, v_in * alpha / (1.0 - alpha)


@dataclass
class SeRow:
    iter: int
    v_in_A: float = math.nan
    v_out_A: float = math.nan
    v_in_B: float = math.nan
    v_out_B: float = math.nan
    alpha_A: float = math.nan
    alpha_B: float = math.nan
    predicted_mse: float = math.nan


@dataclass
class SeTrace:
    rows: list = field(default_factory=list)
    converged: bool = False

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def final(self) -> SeRow:
        return self.rows[-1]


def run_se(config: ScVampConfig, mmse_a: MmseFunction,
           mmse_b: MmseFunction) -> SeTrace:
    """Variance recursion started from ``v_out_B = v_init``.

    Row 0 is the initialisation; its ``predicted_mse`` is ``v_init`` (the
    error of the all-zero start when ``v_init`` is the prior variance).
    Stops after ``max_iterations`` or when both extrinsic variances move by
    less than ``stop_tolerance`` relative.
    """
    trace = SeTrace([SeRow(iter=0, v_out_B=config.v_init,
                           predicted_mse=config.v_init)])
    v_b_out = config.v_init
    prev = None
    for t in range(1, config.max_iterations + 1):
        v_in_a = v_b_out
        a_a, _, v_a_out = se_step(v_in_a, mmse_a, config.siso_a.alpha_clip)
        a_b, v_post_b, v_b_out = se_step(v_a_out, mmse_b, config.siso_b.alpha_clip)
        trace.rows.append(SeRow(t, v_in_a, v_a_out, v_a_out, v_b_out,
                                a_a, a_b, v_post_b))
        if prev is not None:
            if (abs(v_a_out - prev[0]) <= config.stop_tolerance * prev[0]
                    and abs(v_b_out - prev[1]) <= config.stop_tolerance * prev[1]):
                trace.converged = True
                break
        prev = (v_a_out, v_b_out)
    return trace


def scalar_gaussian_mi(p: float, sigma2: float) -> float:
    return 0.5 * math.log1p(p / sigma2)


def vector_gaussian_mi(eigenvalues, p: float, sigma2: float) -> float:
    """Sum of per-mode capacities ``0.5 log(1 + lambda P / sigma2)`` in nats."""
    lam = np.asarray(eigenvalues, dtype=float)
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    return float(np.sum(0.5 * np.log1p(lam * p / sigma2)))


@dataclass
class FixedPointReport:
    v_star: float
    mutual_information_nats: float
    iterations_to_converge: int
    se_v_star: float


def scalar_gaussian_fixed_point(p: float, sigma2: float,
                                max_iterations: int = 50) -> FixedPointReport:
    """Fixed point of the scalar Gaussian channel ``y = x + N(0, sigma2)``.

    The closed form is ``v* = sigma2``; ``se_v_star`` is the value actually
    reached by :func:`run_se` from ``v_init = p``.
    """
    if not (p > 0 and sigma2 > 0):
        raise ValueError("power and noise variance must be positive")
    cfg = ScVampConfig(max_iterations=max_iterations, v_init=p,
                       stop_tolerance=0.0)
    trace = run_se(cfg, gaussian_mmse(sigma2, "likelihood"),
                   gaussian_mmse(p, "prior"))
    v_b = trace.column("v_in_B")[1:]
    settled = int(np.argmax(v_b == v_b[-1])) + 1
    return FixedPointReport(sigma2, scalar_gaussian_mi(p, sigma2), settled,
                            float(v_b[-1]))


@dataclass
class ExitChart:
    grid: np.ndarray
    curve_a: np.ndarray
    curve_b: np.ndarray
    staircase: list

    def rows(self):
        """Flat ``(series, v_in, v_out)`` table rows."""
        out = [("curve_A", float(v), float(w)) for v, w in zip(self.grid, self.curve_a)]
        out += [("curve_B", float(v), float(w)) for v, w in zip(self.grid, self.curve_b)]
        out += [(f"staircase_{mod}", float(vi), float(vo))
                for mod, vi, vo in self.staircase]
        return out

    @property
    def limit(self):
        """Last ``(v_in_A, v_out_A)`` pair of the staircase."""
        a_steps = [(vi, vo) for mod, vi, vo in self.staircase if mod == "A"]
        return a_steps[-1]


def exit_curves(mmse_a: MmseFunction, mmse_b: MmseFunction, v_grid,
                v_init: float | None = None, steps: int = 50,
                clip=DEFAULT_CLIP, tol: float = 1e-14) -> ExitChart:
    """Transfer curves ``v_in -> v_out`` of both modules plus the SE staircase.

    The staircase starts at ``v_in_A = v_init`` (default: largest grid
    value) and alternates A and B until the variances stop moving.
    """
    grid = np.asarray(v_grid, dtype=float)
    if np.any(grid <= 0):
        raise ValueError("variance grid must be positive")
    curve_a = np.array([se_step(v, mmse_a, clip)[2] for v in grid])
    curve_b = np.array([se_step(v, mmse_b, clip)[2] for v in grid])
    v = float(grid.max()) if v_init is None else float(v_init)
    stairs = []
    for _ in range(steps):
        va = se_step(v, mmse_a, clip)[2]
        vb = se_step(va, mmse_b, clip)[2]
        stairs.append(("A", v, va))
        stairs.append(("B", va, vb))
        moved = abs(vb - v) > tol * v
        v = vb
        if not moved:
            break
    return ExitChart(grid, curve_a, curve_b, stairs)
