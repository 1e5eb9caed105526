"""Score functions of Gaussian-smoothed priors and linear-Gaussian likelihoods.

Every score here is the gradient of a log-density of the *noisy* input
``x_in = x + z`` with ``z ~ N(0, v_in I)``.  Inputs may carry leading batch
axes; the last axis is the signal dimension.

The module exposes two layers:

* plain functions (``score_gaussian_prior`` and friends) taking a params
  record, convenient for tests and oracles;
* :class:`ScoreModel` subclasses wrapping them behind the single
  ``score(x_in, v_in, y=None)`` contract used by the SISO block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RngStream, SensingMatrix, matmul

__all__ = [
    "VarianceClampWarning",
    "GaussianPriorParams",
    "BernoulliGaussianParams",
    "PairwiseGaussianParams",
    "LinearLikelihoodParams",
    "score_gaussian_prior",
    "score_bg_prior",
    "score_pairwise_gaussian",
    "lmmse_estimate",
    "conditional_score_linear",
    "implicit_score_from_denoiser",
    "ScoreModel",
    "GaussianPrior",
    "BernoulliGaussianPrior",
    "PairwiseGaussianPrior",
    "LinearGaussianLikelihood",
    "ImplicitDenoiserScore",
    "SCORE_MODEL_KINDS",
]

DEFAULT_V_FLOOR = 1e-8


class VarianceClampWarning(RuntimeWarning):
    """An input variance was raised to the configured floor."""


@dataclass(frozen=True)
class GaussianPriorParams:
    power: float

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("prior power must be positive")


@dataclass(frozen=True)
class BernoulliGaussianParams:
    rho: float
    var: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("sparsity rate must lie in [0, 1]")
        if not self.var > 0:
            raise ValueError("active variance must be positive")


@dataclass(frozen=True)
class PairwiseGaussianParams:
    var: float = 1.0
    xi: float = 0.0

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("marginal variance must be positive")
        if not -1.0 < self.xi < 1.0:
            raise ValueError("correlation must lie in (-1, 1)")

    def covariance(self) -> np.ndarray:
        s2, c = self.var, self.xi * self.var
        return np.array([[s2, c], [c, s2]])


@dataclass(frozen=True)
class LinearLikelihoodParams:
    a: SensingMatrix
    noise_var: float

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")


def _check_variance(v_in):
    if not v_in > 0:
        raise ValueError(f"input variance must be positive, got {v_in}")


def score_gaussian_prior(x_in, v_in, p: GaussianPriorParams):
    _check_variance(v_in)
    return -np.asarray(x_in, dtype=float) / (p.power + v_in)


def score_bg_prior(x_in, v_in, p: BernoulliGaussianParams):
    """Score of ``(1 - rho) N(0, v_in) + rho N(0, var + v_in)``.

    The mixture responsibilities are formed in the log domain so that large
    ``|x_in|`` does not underflow either branch.
    """
    _check_variance(v_in)
    x = np.asarray(x_in, dtype=float)
    v0, v1 = v_in, p.var + v_in
    with np.errstate(divide="ignore"):
        log_w0 = np.log1p(-p.rho) if p.rho < 1 else -np.inf
        log_w1 = np.log(p.rho)
    l0 = log_w0 - 0.5 * np.log(v0) - 0.5 * x * x / v0
    l1 = log_w1 - 0.5 * np.log(v1) - 0.5 * x * x / v1
    top = np.maximum(l0, l1)
    e0, e1 = np.exp(l0 - top), np.exp(l1 - top)
    total = e0 + e1
    pi0, pi1 = e0 / total, e1 / total
    return -(pi0 * (x / v0) + pi1 * (x / v1))


def score_pairwise_gaussian(x_in, v_in, p: PairwiseGaussianParams):
    """Score for consecutive pairs ``(x_1, x_2), (x_3, x_4), ...``."""
    _check_variance(v_in)
    x = np.asarray(x_in, dtype=float)
    if x.shape[-1] % 2:
        raise ValueError(
            f"pairwise prior needs an even dimension, got {x.shape[-1]}")
    pairs = x.reshape(x.shape[:-1] + (-1, 2))
    a = p.var + v_in
    b = p.xi * p.var
    det = a * a - b * b
    r1, r2 = pairs[..., 0], pairs[..., 1]
    s = np.stack([-(a * r1 - b * r2) / det, -(a * r2 - b * r1) / det], axis=-1)
    return s.reshape(x.shape)


def _linear_shapes(x_in, y, a: SensingMatrix):
    x_in = np.asarray(x_in, dtype=float)
    y = np.asarray(y, dtype=float)
    if x_in.shape[-1] != a.n or y.shape[-1] != a.m:
        raise ValueError(
            f"dimension mismatch: A is {a.m}x{a.n}, x_in has {x_in.shape[-1]}, "
            f"y has {y.shape[-1]}")
    if x_in.shape[:-1] != y.shape[:-1]:
        raise ValueError("x_in and y have different batch shapes")
    return x_in, y


def _posterior_weights(v_in, p: LinearLikelihoodParams) -> np.ndarray:
    d2 = p.a.padded_singular_values() ** 2
    return 1.0 / (1.0 / v_in + d2 / p.noise_var)


def lmmse_estimate(x_in, v_in, y, p: LinearLikelihoodParams):
    """Wiener filter combining ``N(x_in, v_in I)`` with ``y = A x + w``.

    Works in the right-singular basis of ``A``: the posterior precision is
    diagonal there, so the solve is two rotations and a scaling.

    Returns
    -------
    x_hat : ndarray
        Posterior mean, same shape as ``x_in``.
    trace_cov : float
        Trace of the posterior covariance.
    """
    _check_variance(v_in)
    x_in, y = _linear_shapes(x_in, y, p.a)
    a = p.a
    k = a.rank_dim
    w = _posterior_weights(v_in, p)
    rot = matmul(x_in, a.v) / v_in
    rot[..., :k] += (matmul(y, a.u[:, :k]) * a.d) / p.noise_var
    x_hat = matmul(rot * w, a.v.T)
    return x_hat, float(np.sum(w))


def conditional_score_linear(x_in, v_in, y, p: LinearLikelihoodParams):
    x_hat, _ = lmmse_estimate(x_in, v_in, y, p)
    return (x_hat - np.asarray(x_in, dtype=float)) / v_in


def implicit_score_from_denoiser(denoiser: Callable, x_in, v_in,
                                 v_floor: float = DEFAULT_V_FLOOR):
    """Score implied by a denoiser through Tweedie's formula.

    ``v_in`` below ``v_floor`` is clamped (with a
    :class:`VarianceClampWarning`) to bound the ``1 / v_in`` blow-up.
    """
    if v_in < v_floor:
        warnings.warn(
            f"input variance {v_in:.3g} clamped to floor {v_floor:.3g}",
            VarianceClampWarning, stacklevel=2)
        v_in = v_floor
    x = np.asarray(x_in, dtype=float)
    return (np.asarray(denoiser(x), dtype=float) - x) / v_in


class ScoreModel:
    """Evaluator ``score(x_in, v_in, y=None) -> array`` shaped like ``x_in``.

    Subclasses with a closed-form Fisher information override
    :meth:`fisher`; priors that can be sampled override
    :meth:`sample_prior`.
    """

    kind = "abstract"
    conditional = False

    def score(self, x_in, v_in, y=None):
        raise NotImplementedError

    def fisher(self, v_in, n):
        """Expected squared score norm over an ``n``-dimensional input."""
        raise NotImplementedError(f"{self.kind} has no closed-form Fisher")

    def sample_prior(self, rng: RngStream, shape):
        raise NotImplementedError(f"{self.kind} has no prior sampler")

    def prior_variance(self) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class GaussianPrior(ScoreModel):
    kind = "gaussian"

    def __init__(self, power: float = 1.0):
        self.params = GaussianPriorParams(power)

    def score(self, x_in, v_in, y=None):
        return score_gaussian_prior(x_in, v_in, self.params)

    def fisher(self, v_in, n):
        return n / (self.params.power + v_in)

    def mmse(self, v):
        """Per-symbol MMSE of the scalar channel at noise variance ``v``."""
        p = self.params.power
        return v * p / (v + p)

    def sample_prior(self, rng, shape):
        return np.sqrt(self.params.power) * rng.standard_normal(shape)

    def prior_variance(self):
        return self.params.power

    def describe(self):
        return {"kind": self.kind, "power": self.params.power}


class BernoulliGaussianPrior(ScoreModel):
    kind = "bernoulli-gaussian"

    def __init__(self, rho: float = 0.1, var: float = 1.0):
        self.params = BernoulliGaussianParams(rho, var)

    def score(self, x_in, v_in, y=None):
        return score_bg_prior(x_in, v_in, self.params)

    def sample_prior(self, rng, shape):
        active = rng.uniform(size=shape) < self.params.rho
        return active * (np.sqrt(self.params.var) * rng.standard_normal(shape))

    def prior_variance(self):
        return self.params.rho * self.params.var

    def describe(self):
        return {"kind": self.kind, "rho": self.params.rho,
                "var": self.params.var}


class PairwiseGaussianPrior(ScoreModel):
    kind = "pairwise-gaussian"

    def __init__(self, var: float = 1.0, xi: float = 0.9):
        self.params = PairwiseGaussianParams(var, xi)

    def score(self, x_in, v_in, y=None):
        return score_pairwise_gaussian(x_in, v_in, self.params)

    def fisher(self, v_in, n):
        # eigenvalues of the pair covariance are var * (1 +- xi)
        lam = self.params.var * np.array([1 + self.params.xi,
                                          1 - self.params.xi])
        return (n / 2) * float(np.sum(1.0 / (lam + v_in)))

    def mmse(self, v):
        lam = self.params.var * np.array([1 + self.params.xi,
                                          1 - self.params.xi])
        return float(np.mean(lam * v / (lam + v)))

    def sample_prior(self, rng, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        if shape[-1] % 2:
            raise ValueError("pairwise prior needs an even dimension")
        chol = np.linalg.cholesky(self.params.covariance())
        z = rng.standard_normal(shape[:-1] + (shape[-1] // 2, 2))
        return matmul(z, chol.T).reshape(shape)

    def prior_variance(self):
        return self.params.var

    def describe(self):
        return {"kind": self.kind, "var": self.params.var,
                "xi": self.params.xi}


class LinearGaussianLikelihood(ScoreModel):
    """Conditional score of ``x_in`` given ``y = A x + w`` under a flat prior."""

    kind = "linear-lmmse"
    conditional = True

    def __init__(self, a: SensingMatrix, noise_var: float):
        self.params = LinearLikelihoodParams(a, noise_var)

    def score(self, x_in, v_in, y=None):
        if y is None:
            raise ValueError("linear likelihood needs an observation")
        return conditional_score_linear(x_in, v_in, y, self.params)

    def posterior(self, x_in, v_in, y):
        return lmmse_estimate(x_in, v_in, y, self.params)

    def trace_cov(self, v_in) -> float:
        return float(np.sum(_posterior_weights(v_in, self.params)))

    def fisher(self, v_in, n):
        # Stein: E||s||^2 = -E[div s] = (n - Tr(Sigma_post) / v_in) / v_in
        return (n - self.trace_cov(v_in) / v_in) / v_in

    def mmse(self, v):
        return self.trace_cov(v) / self.params.a.n

    def describe(self):
        a = self.params.a
        return {"kind": self.kind, "m": a.m, "n": a.n,
                "noise_var": self.params.noise_var}


class ImplicitDenoiserScore(ScoreModel):
    """Score recovered from a black-box denoiser ``eta(x_in, v_in)``."""

    kind = "implicit-denoiser"

    def __init__(self, denoiser: Callable, v_floor: float = DEFAULT_V_FLOOR):
        self.denoiser = denoiser
        self.v_floor = v_floor

    def score(self, x_in, v_in, y=None):
        v_eval = max(v_in, self.v_floor)
        return implicit_score_from_denoiser(
            lambda x: self.denoiser(x, v_eval), x_in, v_in, self.v_floor)

    def describe(self):
        return {"kind": self.kind, "v_floor": self.v_floor}


SCORE_MODEL_KINDS = (
    "gaussian",
    "bernoulli-gaussian",
    "pairwise-gaussian",
    "linear-lmmse",
    "learned-mlp",
    "implicit-denoiser",
)
