"""Two-module SC-VAMP iteration.

Module A consumes the observation (conditional score), Module B the prior
(unconditional score).  Each half-iteration is one :func:`siso_forward`
call on the whole problem batch; the modules hand each other their
extrinsic messages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .score_models import ScoreModel
from .siso import SisoConfig, SisoMessage, SisoResult, siso_forward

__all__ = [
    "ScVampConfig",
    "ProblemBatch",
    "TraceRow",
    "RunTrace",
    "ScVampDivergence",
    "init_messages",
    "run_scvamp",
    "batch_mse",
]

TRACE_COLUMNS = (
    "iter", "v_in_A", "v_out_A", "v_in_B", "v_out_B", "alpha_A", "alpha_B",
    "fisher_A", "fisher_B", "calib_A", "calib_B", "mse_actual", "clip_events",
)


@dataclass(frozen=True)
class ScVampConfig:
    max_iterations: int = 10
    v_init: float = 1.0
    damping: float = 1.0
    stop_tolerance: float = 1e-8
    record_mse: bool = True
    siso_a: SisoConfig = SisoConfig()
    siso_b: SisoConfig = SisoConfig()
    final_estimate: str = "posterior_b"

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.v_init > 0:
            raise ValueError("v_init must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.final_estimate not in ("posterior_b", "posterior_a"):
            raise ValueError(f"unknown final_estimate {self.final_estimate!r}")


@dataclass
class ProblemBatch:
    """``B`` problem instances sharing the forward model.

    ``y`` is ``(B, M)`` (or ``None`` for denoising-only problems) and
    ``truth``, when known, is ``(B, N)``.
    """

    n: int
    y: np.ndarray | None = None
    truth: np.ndarray | None = None
    size: int = field(init=False)

    def __post_init__(self):
        sizes = set()
        if self.y is not None:
            self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
            sizes.add(self.y.shape[0])
        if self.truth is not None:
            self.truth = np.atleast_2d(np.asarray(self.truth, dtype=float))
            if self.truth.shape[1] != self.n:
                raise ValueError("truth has the wrong signal dimension")
            sizes.add(self.truth.shape[0])
        if len(sizes) > 1:
            raise ValueError("y and truth disagree on the batch size")
        if not sizes:
            raise ValueError("batch needs observations or ground truth")
        self.size = sizes.pop()


@dataclass
class TraceRow:
    iter: int
    v_in_A: float = math.nan
    v_out_A: float = math.nan
    v_in_B: float = math.nan
    v_out_B: float = math.nan
    alpha_A: float = math.nan
    alpha_B: float = math.nan
    fisher_A: float = math.nan
    fisher_B: float = math.nan
    calib_A: float = math.nan
    calib_B: float = math.nan
    mse_actual: float = math.nan
    clip_events: int = 0


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    damping: float = 1.0
    fisher_batch: int = 0
    converged: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def iterations(self) -> list:
        """Rows after the initialisation row."""
        return [r for r in self.rows if r.iter > 0]

    def as_dicts(self) -> list:
        return [asdict(r) for r in self.rows]


class ScVampDivergence(RuntimeError):
    """A message became non-finite; ``trace`` holds the rows so far."""

    def __init__(self, message, trace: RunTrace):
        super().__init__(message)
        self.trace = trace


def init_messages(config: ScVampConfig, batch: ProblemBatch) -> SisoMessage:
    return SisoMessage(np.zeros((batch.size, batch.n)), config.v_init)


def batch_mse(estimates, truths) -> float:
    """Per-symbol squared error averaged over the batch."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise ValueError("empty batch")
    diff = (est - tru).reshape(-1, est.shape[-1])
    return float(np.sum(np.sum(diff * diff, axis=1)) / diff.size)


def _damp(new: SisoMessage, old: SisoMessage | None, eta: float) -> SisoMessage:
    if old is None or eta == 1.0:
        return new
    return SisoMessage(eta * new.mean + (1 - eta) * old.mean,
                       eta * new.variance + (1 - eta) * old.variance)


def _rel_change(new, old):
    return abs(new - old) / old


def run_scvamp(config: ScVampConfig, module_a: ScoreModel,
               module_b: ScoreModel, batch: ProblemBatch,
               on_iteration: Callable | None = None):
    """Iterate A -> B until ``max_iterations`` or variance convergence.

    ``on_iteration(t, result_a, result_b)`` is called after every full
    iteration, e.g. to capture error vectors for diagnostics.

    Returns
    -------
    estimates : ndarray, shape (B, N)
        Module B posterior means of the last iteration (all zeros when no
        iteration ran).
    trace : RunTrace
    """
    trace = RunTrace(damping=config.damping)
    msg_b = init_messages(config, batch)
    truth = batch.truth if config.record_mse else None
    estimates = msg_b.mean.copy()
    trace.rows.append(TraceRow(
        iter=0, v_out_B=config.v_init,
        mse_actual=batch_mse(estimates, truth) if truth is not None else math.nan))

    prev_a = prev_b = None
    for t in range(1, config.max_iterations + 1):
        try:
            res_a = siso_forward(module_a, msg_b, batch.y, config.siso_a)
            msg_a = _damp(res_a.extrinsic, prev_a, config.damping)
            res_b = siso_forward(module_b, msg_a, None, config.siso_b)
            new_b = _damp(res_b.extrinsic, prev_b, config.damping)
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            # invalid messages, overflow, or a sampler that diverged inside a module
            trace.events.append(f"iter {t}: {exc}")
            raise ScVampDivergence(f"iteration {t}: {exc}", trace) from exc

        res = res_b if config.final_estimate == "posterior_b" else res_a
        estimates = res.posterior_mean
        events = res_a.events + res_b.events
        trace.events.extend(f"iter {t}: {e}" for e in events)
        trace.fisher_batch = res_b.batch_count
        trace.rows.append(TraceRow(
            iter=t,
            v_in_A=msg_b.variance, v_out_A=msg_a.variance,
            v_in_B=msg_a.variance, v_out_B=new_b.variance,
            alpha_A=res_a.alpha, alpha_B=res_b.alpha,
            fisher_A=res_a.fisher_estimate, fisher_B=res_b.fisher_estimate,
            calib_A=res_a.calibration, calib_B=res_b.calibration,
            mse_actual=batch_mse(estimates, truth) if truth is not None else math.nan,
            clip_events=len(events),
        ))
        if on_iteration is not None:
            on_iteration(t, res_a, res_b)

        done = (prev_a is not None
                and _rel_change(msg_a.variance, prev_a.variance) < config.stop_tolerance
                and _rel_change(new_b.variance, prev_b.variance) < config.stop_tolerance)
        prev_a, prev_b = msg_a, new_b
        msg_b = new_b
        if done:
            trace.converged = True
            break
    return estimates, trace
