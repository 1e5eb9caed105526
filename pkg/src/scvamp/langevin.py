"""Langevin-sampling observation module for general forward models.

For ``y = f(x) + N(0, noise_var I)`` and an incoming message
``N(x_in, v_in I)``, the conditional posterior is sampled with the
unadjusted Langevin algorithm

    x <- x + delta * (grad log p(y | x) - (x - x_in) / v_in) + sqrt(2 delta) z

where ``grad log p(y | x) = J_f(x)^T (y - f(x)) / noise_var`` is evaluated
as a vector-Jacobian product.  The Monte Carlo posterior mean then gives an
implicit conditional score ``(x_post - x_in) / v_in`` that enters the usual
SISO update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import RngStream, matmul
from .score_models import ScoreModel
from .siso import SisoConfig, SisoMessage, SisoResult, siso_forward

__all__ = [
    "ForwardModel",
    "FORWARD_MODELS",
    "make_forward_model",
    "linear_forward",
    "tanh_forward",
    "clip_forward",
    "LangevinConfig",
    "LangevinResult",
    "LangevinDivergence",
    "grad_log_likelihood",
    "ula_step",
    "posterior_mean_langevin",
    "LangevinLikelihoodScore",
    "hybrid_module_a",
]


@dataclass(frozen=True)
class ForwardModel:
    """Forward map with a matching vector-Jacobian product.

    ``apply(x)`` maps ``(..., N)`` to ``(..., M)`` and ``vjp(x, u)`` returns
    ``J_f(x)^T u`` with shape ``(..., N)``.
    """

    name: str
    n: int
    m: int
    apply: Callable
    vjp: Callable
    noise_var: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")


def linear_forward(a, noise_var: float) -> ForwardModel:
    a = np.asarray(a, dtype=float)
    return ForwardModel("linear", a.shape[1], a.shape[0],
                        lambda x: matmul(x, a.T), lambda x, u: matmul(u, a), noise_var)


def tanh_forward(noise_var: float, a=None, n: int = 1) -> ForwardModel:
    """``f(x) = tanh(A x)``, elementwise ``tanh(x)`` when ``a`` is None."""
    if a is None:
        return ForwardModel("tanh", n, n, np.tanh,
                            lambda x, u: u * (1.0 - np.tanh(x) ** 2), noise_var)
    a = np.asarray(a, dtype=float)

    def vjp(x, u):
        t = np.tanh(matmul(x, a.T))
        return matmul(u * (1.0 - t * t), a)

    return ForwardModel("tanh", a.shape[1], a.shape[0],
                        lambda x: np.tanh(matmul(x, a.T)), vjp, noise_var)


def clip_forward(noise_var: float, level: float, a=None, n: int = 1) -> ForwardModel:
    """Saturation ``clip(A x, -level, level)``; the derivative is the
    indicator of the unsaturated region."""
    if not level > 0:
        raise ValueError("clip level must be positive")
    if a is None:
        a = np.eye(n)
    a = np.asarray(a, dtype=float)

    def vjp(x, u):
        z = matmul(x, a.T)
        return matmul(u * (np.abs(z) < level), a)

    return ForwardModel("clip", a.shape[1], a.shape[0],
                        lambda x: np.clip(matmul(x, a.T), -level, level), vjp,
                        noise_var, {"level": level})


FORWARD_MODELS = {
    "linear": linear_forward,
    "tanh": tanh_forward,
    "clip": clip_forward,
}


def make_forward_model(name: str, **kwargs) -> ForwardModel:
    try:
        factory = FORWARD_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown forward model {name!r}; "
                         f"choose from {sorted(FORWARD_MODELS)}") from None
    return factory(**kwargs)


@dataclass(frozen=True)
class LangevinConfig:
    """ULA budget.  ``step_size=None`` means ``step_scale * min(v_in, noise_var)``.

    ``decay="inv_sqrt"`` uses ``delta_k = delta / sqrt(1 + k / burn_in)``.
    """

    step_size: float | None = None
    step_scale: float = 0.05
    steps: int = 500
    burn_in: int = 200
    particles: int = 32
    warm_start: bool = True
    decay: str = "none"

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not self.step_scale > 0:
            raise ValueError("step scale must be positive")
        if not 0 <= self.burn_in < self.steps:
            raise ValueError("need 0 <= burn_in < steps")
        if self.particles < 1:
            raise ValueError("particles must be >= 1")
        if self.decay not in ("none", "inv_sqrt"):
            raise ValueError(f"unknown decay {self.decay!r}")

    def delta(self, v_in: float, noise_var: float) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.step_scale * min(v_in, noise_var)


class LangevinDivergence(RuntimeError):
    def __init__(self, message, step: int, diagnostics: dict | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


@dataclass
class LangevinResult:
    """Monte Carlo posterior summary.  Unpacks as ``(mean, sample_variance)``."""

    mean: np.ndarray
    sample_variance: float
    standard_error: np.ndarray
    samples: np.ndarray
    delta: float

    def __iter__(self):
        yield self.mean
        yield self.sample_variance


def grad_log_likelihood(model: ForwardModel, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != model.n or y.shape[-1] != model.m:
        raise ValueError(f"expected x[..., {model.n}] and y[..., {model.m}]")
    return model.vjp(x, y - model.apply(x)) / model.noise_var


def ula_step(x, x_in, v_in, model: ForwardModel | None, y, delta, rng: RngStream,
             step_index: int = 0):
    """One Euler-Maruyama step targeting ``p(y | x) N(x; x_in, v_in I)``.

    ``model=None`` (or ``y=None``) drops the likelihood term.
    """
    if delta < 0:
        raise ValueError("step size must be non-negative")
    x = np.asarray(x, dtype=float)
    z = rng.standard_normal(x.shape)
    if delta == 0:
        return x.copy()
    drift = -(x - x_in) / v_in
    if model is not None and y is not None:
        drift = drift + grad_log_likelihood(model, x, y)
    out = x + delta * drift + math.sqrt(2.0 * delta) * z
    if not np.all(np.isfinite(out)):
        raise LangevinDivergence(f"non-finite Langevin state at step {step_index}",
                                 step_index)
    return out


def posterior_mean_langevin(x_in, v_in, y, model: ForwardModel | None,
                            config: LangevinConfig, rng: RngStream,
                            warm=None) -> LangevinResult:
    """Average of ``particles`` ULA chains after burn-in.

    ``x_in`` is ``(N,)`` or ``(B, N)``; chains run jointly with shape
    ``(particles, *x_in.shape)``.  ``warm`` (same shape as the chain
    state) replaces the default start at ``x_in``.
    """
    if not v_in > 0:
        raise ValueError("input variance must be positive")
    x_in = np.asarray(x_in, dtype=float)
    noise_var = model.noise_var if model is not None else v_in
    delta0 = config.delta(v_in, noise_var)
    shape = (config.particles,) + x_in.shape
    if warm is not None:
        x = np.array(warm, dtype=float)
        if x.shape != shape:
            raise ValueError(f"warm-start samples have shape {x.shape}, expected {shape}")
    else:
        x = np.broadcast_to(x_in, shape).copy()

    total = np.zeros(shape)
    total_sq = np.zeros(shape)
    kept = config.steps - config.burn_in
    for k in range(config.steps):
        delta = delta0
        if config.decay == "inv_sqrt":
            delta = delta0 / math.sqrt(1.0 + k / max(config.burn_in, 1))
        try:
            x = ula_step(x, x_in, v_in, model, y, delta, rng, k)
        except LangevinDivergence as exc:
            exc.diagnostics.update(delta=delta0, kept=max(k - config.burn_in, 0))
            raise
        if k >= config.burn_in:
            total += x
            total_sq += x * x

    chain_means = total / kept
    mean = np.mean(chain_means, axis=0)
    second = np.mean(total_sq / kept, axis=0)
    sample_var = float(np.mean(second - mean * mean))
    if config.particles > 1:
        se = np.std(chain_means, axis=0, ddof=1) / math.sqrt(config.particles)
    else:
        se = np.full(x_in.shape, math.nan)
    return LangevinResult(mean, sample_var, se, x, delta0)


class LangevinLikelihoodScore(ScoreModel):
    """Conditional score ``(x_post - x_in) / v_in`` from ULA posterior means.

    Each call draws from a fresh sub-stream of ``rng``.  With
    ``config.warm_start`` the chains of the next call start from the final
    samples of the previous one (when the batch shape is unchanged).
    """

    kind = "langevin"
    conditional = True

    def __init__(self, model: ForwardModel, config: LangevinConfig, rng: RngStream):
        self.model = model
        self.config = config
        self.rng = rng
        self.calls = 0
        self.last: LangevinResult | None = None

    def score(self, x_in, v_in, y=None):
        if y is None:
            raise ValueError("the Langevin likelihood module needs an observation")
        warm = None
        if self.config.warm_start and self.last is not None:
            if self.last.samples.shape[1:] == np.shape(x_in):
                warm = self.last.samples
        res = posterior_mean_langevin(x_in, v_in, y, self.model, self.config,
                                      self.rng.split(f"call:{self.calls}"), warm)
        self.calls += 1
        self.last = res
        return (res.mean - np.asarray(x_in, dtype=float)) / v_in

    def describe(self):
        return {"kind": self.kind, "forward": self.model.name,
                "noise_var": self.model.noise_var, "steps": self.config.steps,
                "burn_in": self.config.burn_in, "particles": self.config.particles}


def hybrid_module_a(message: SisoMessage, y, model: ForwardModel,
                    lang_config: LangevinConfig = LangevinConfig(),
                    siso_config: SisoConfig = SisoConfig(),
                    rng: RngStream | None = None,
                    score_model: LangevinLikelihoodScore | None = None) -> SisoResult:
    """SISO observation module driven by Langevin posterior means.

    Pass a persistent ``score_model`` to keep warm-start state across
    iterations; otherwise a fresh one is built from ``rng``.
    The per-symbol sample variance and the chain standard error land in
    ``result.diagnostics``.
    """
    if siso_config.fisher == "analytic":
        raise ValueError("the Langevin module has no closed-form Fisher information")
    if score_model is None:
        score_model = LangevinLikelihoodScore(model, lang_config,
                                              rng or RngStream(0))
    res = siso_forward(score_model, message, y, siso_config)
    last = score_model.last
    res.diagnostics.update(
        sample_variance=last.sample_variance,
        mc_standard_error=float(np.sqrt(np.mean(last.standard_error ** 2))),
        step_size=last.delta,
    )
    return res
