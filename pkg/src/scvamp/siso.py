"""Score-driven soft-in/soft-out block.

One call of :func:`siso_forward` turns an incoming Gaussian message
``N(x_in, v_in I)`` (plus an observation for conditional models) into

* the posterior mean ``x_post = x_in + v_in * s`` (Tweedie),
* the Onsager coefficient ``alpha = 1 - v_in * J / N`` where ``J`` is the
  Fisher information, estimated as the batch mean of ``||s||^2``,
* the extrinsic message obtained by dividing the input Gaussian out of
  the posterior.

Messages are batched: ``mean`` may be ``(N,)`` or ``(B, N)``.  The variance
is a single scalar shared by the whole batch because one ``alpha`` is
estimated per evaluation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .score_models import DEFAULT_V_FLOOR, ScoreModel

__all__ = [
    "AlphaClipWarning",
    "CalibrationFallbackWarning",
    "SisoMessage",
    "SisoResult",
    "SisoConfig",
    "tweedie_posterior_mean",
    "estimate_fisher_minibatch",
    "onsager_coefficient",
    "stein_calibration",
    "extrinsic_message",
    "siso_forward",
]

DEFAULT_CLIP = (1e-6, 1.0 - 1e-6)


class AlphaClipWarning(RuntimeWarning):
    """The Onsager coefficient left the open unit interval and was clamped."""


class CalibrationFallbackWarning(RuntimeWarning):
    """Stein calibration denominator vanished; ``c = 1`` was used."""


@dataclass(frozen=True)
class SisoMessage:
    mean: np.ndarray
    variance: float

    def __post_init__(self):
        v = float(self.variance)
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"message variance must be positive and finite, got {v}")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("message mean contains non-finite entries")
        object.__setattr__(self, "variance", v)


@dataclass
class SisoResult:
    extrinsic: SisoMessage
    posterior_mean: np.ndarray
    posterior_variance: float
    alpha: float
    alpha_raw: float
    fisher_estimate: float
    calibration: float
    batch_count: int
    events: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SisoConfig:
    """Knobs for one SISO module.

    ``fisher="minibatch"`` estimates J from the batch of scores;
    ``"analytic"`` asks the score model for its closed-form J.
    ``batch_size`` caps how many instances enter the J / c reductions
    (``None`` uses the whole batch).
    """

    alpha_clip: tuple = DEFAULT_CLIP
    stein_calibration: bool = False
    batch_size: int | None = None
    v_floor: float = DEFAULT_V_FLOOR
    fisher: str = "minibatch"

    def __post_init__(self):
        lo, hi = self.alpha_clip
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("alpha_clip must satisfy 0 < lo < hi < 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.fisher not in ("minibatch", "analytic"):
            raise ValueError(f"unknown fisher mode {self.fisher!r}")


def tweedie_posterior_mean(x_in, v_in, score):
    if not v_in > 0:
        raise ValueError("input variance must be positive")
    x_in = np.asarray(x_in, dtype=float)
    score = np.asarray(score, dtype=float)
    if x_in.shape != score.shape:
        raise ValueError("score and input shapes differ")
    return x_in + v_in * score


def _as_batch(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr.reshape(-1, arr.shape[-1])


def estimate_fisher_minibatch(scores, n: int) -> float:
    """Batch mean of the squared score norm.

    ``scores`` is a list of length-``n`` vectors or a ``(B, n)`` array.
    """
    s = _as_batch(scores) if len(scores) else np.empty((0, n))
    if s.shape[0] == 0:
        raise ValueError("cannot estimate Fisher information from an empty batch")
    if s.shape[1] != n:
        raise ValueError(f"score vectors have length {s.shape[1]}, expected {n}")
    return float(np.sum(np.sum(s * s, axis=1)) / s.shape[0])


def onsager_coefficient(v_in, fisher, n, clip=DEFAULT_CLIP) -> float:
    """``clamp(1 - v_in * fisher / n, lo, hi)``; clamping warns."""
    if not v_in > 0:
        raise ValueError("input variance must be positive")
    if fisher < 0:
        raise ValueError("Fisher information must be non-negative")
    raw = 1.0 - (v_in / n) * fisher
    lo, hi = clip
    if not lo <= raw <= hi:
        warnings.warn(f"alpha {raw:.6g} clipped to [{lo:g}, {hi:g}]",
                      AlphaClipWarning, stacklevel=2)
        return float(min(max(raw, lo), hi))
    return float(raw)


def stein_calibration(inputs, scores, n) -> float:
    """Scale ``c`` making the batch Stein moment ``mean(r^T c s) = -n`` exact."""
    r = _as_batch(inputs)
    s = _as_batch(scores)
    if r.shape != s.shape or r.shape[0] == 0:
        raise ValueError("inputs and scores must be matched, non-empty batches")
    denom = float(np.sum(np.sum(r * s, axis=1)) / r.shape[0])
    if abs(denom) < 1e-12 * n:
        warnings.warn("Stein moment denominator ~ 0; using c = 1",
                      CalibrationFallbackWarning, stacklevel=2)
        return 1.0
    return -n / denom


def extrinsic_message(x_in, v_in, x_post, alpha) -> SisoMessage:
    """Divide ``N(x_in, v_in)`` out of the posterior ``N(x_post, v_in * alpha)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}; clip it first")
    x_in = np.asarray(x_in, dtype=float)
    mean = (np.asarray(x_post, dtype=float) - alpha * x_in) / (1.0 - alpha)
    return SisoMessage(mean, v_in * alpha / (1.0 - alpha))


def siso_forward(model: ScoreModel, message: SisoMessage, y=None,
                 config: SisoConfig = SisoConfig()) -> SisoResult:
    """Run one score-based SISO module on a batch of incoming messages."""
    x_in = np.asarray(message.mean, dtype=float)
    v_in = message.variance
    n = x_in.shape[-1]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if v_in < config.v_floor:
            warnings.warn(f"input variance {v_in:.3g} below floor",
                          RuntimeWarning)
        scores = model.score(x_in, v_in, y)
        flat_in = _as_batch(x_in)
        flat_s = _as_batch(scores)
        b = flat_s.shape[0] if config.batch_size is None else min(
            config.batch_size, flat_s.shape[0])

        c = 1.0
        if config.stein_calibration:
            c = stein_calibration(flat_in[:b], flat_s[:b], n)
            scores = c * scores
            flat_s = c * flat_s

        if config.fisher == "analytic":
            fisher = float(model.fisher(v_in, n))
        else:
            fisher = estimate_fisher_minibatch(flat_s[:b], n)
        raw = 1.0 - (v_in / n) * fisher
        alpha = onsager_coefficient(v_in, fisher, n, config.alpha_clip)
        x_post = tweedie_posterior_mean(x_in, v_in, scores)
        ext = extrinsic_message(x_in, v_in, x_post, alpha)
    events = [f"{w.category.__name__}: {w.message}" for w in caught]
    return SisoResult(
        extrinsic=ext,
        posterior_mean=x_post,
        posterior_variance=v_in * alpha,
        alpha=alpha,
        alpha_raw=raw,
        fisher_estimate=fisher,
        calibration=c,
        batch_count=b,
        events=events,
    )
