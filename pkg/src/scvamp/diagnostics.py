"""Empirical Gaussianity checks for message-passing error vectors.

The decoupling picture says that the input to the prior module behaves
like ``x + e`` with ``e ~ N(0, v I)``.  The statistics here test that
claim at finite size: sample variance against the claimed ``v``, excess
kurtosis, a spacing-based KL divergence to ``N(0, v)`` and the lagged
autocorrelation along the coordinate index.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

__all__ = [
    "KL_NULL_BAND",
    "KURTOSIS_LIMIT",
    "GaussianityReport",
    "excess_kurtosis",
    "kl_to_gaussian",
    "vasicek_window",
    "lag_autocorrelation",
    "error_decoupling_report",
]

# Range of the KL estimate on exact Gaussian samples (n >= 1e5, matched
# variance).  Measured over 100 seeds; see tests/test_diagnostics.py.
KL_NULL_BAND = (-0.01, 0.02)
KURTOSIS_LIMIT = 0.1


def excess_kurtosis(samples) -> float:
    """Bias-corrected sample excess kurtosis (the ``G2`` estimator)."""
    x = np.ravel(np.asarray(samples, dtype=float))
    if x.size < 4:
        raise ValueError("excess kurtosis needs at least 4 samples")
    if not np.var(x) > 0:
        raise ValueError("samples have zero variance")
    return float(stats.kurtosis(x, fisher=True, bias=False))


def vasicek_window(n: int) -> int:
    return max(1, int(math.isqrt(n)))


def kl_to_gaussian(samples, v: float, window: int | None = None) -> float:
    """KL divergence (nats) from the sample distribution to ``N(0, v)``.

    ``-H + 0.5 log(2 pi v) + m2 / (2 v)`` with ``H`` the Vasicek spacing
    entropy estimate (window ``floor(sqrt(n))`` by default) and ``m2`` the
    raw second moment.
    """
    if not v > 0:
        raise ValueError("reference variance must be positive")
    x = np.ravel(np.asarray(samples, dtype=float))
    if x.size < 1000:
        raise ValueError("KL estimate needs at least 1000 samples")
    m = window or vasicek_window(x.size)
    h = float(stats.differential_entropy(x, window_length=m, method="vasicek"))
    m2 = float(np.mean(x * x))
    return -h + 0.5 * math.log(2 * math.pi * v) + m2 / (2 * v)


def lag_autocorrelation(errors, lags: int) -> np.ndarray:
    """Pooled lag-``k`` autocorrelation along the coordinate axis, ``k = 1..lags``.

    ``sum_b sum_i e[b, i] e[b, i + k] / sum_b sum_i e[b, i]^2`` (no
    centring, since the errors are zero mean under the model).
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    n = e.shape[1]
    if not 1 <= lags < n:
        raise ValueError("need 1 <= lags < N")
    energy = float(np.sum(e * e))
    if energy == 0:
        raise ValueError("errors are identically zero")
    out = np.empty(lags)
    for k in range(1, lags + 1):
        out[k - 1] = np.sum(e[:, :-k] * e[:, k:]) * n / ((n - k) * energy)
    return out


@dataclass
class GaussianityReport:
    sample_size: int
    n: int
    v_claimed: float
    variance: float
    excess_kurtosis: float
    kl_nats: float
    kl_window: int
    autocorrelation: list
    max_abs_autocorrelation: float
    autocorrelation_limit: float
    pass_kurtosis: bool
    pass_kl: bool
    pass_autocorrelation: bool

    @property
    def variance_ratio(self) -> float:
        return self.variance / self.v_claimed

    @property
    def passed(self) -> bool:
        return self.pass_kurtosis and self.pass_kl and self.pass_autocorrelation

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(variance_ratio=self.variance_ratio, passed=self.passed)
        return out


def error_decoupling_report(errors, v_claimed: float, lags: int = 5) -> GaussianityReport:
    """Gaussianity statistics of a ``(B, N)`` error matrix against ``N(0, v_claimed)``.

    Pass thresholds: ``|kurtosis| < 0.1``, KL inside :data:`KL_NULL_BAND`,
    and every lag autocorrelation below ``3 / sqrt(N)``.
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    size = e.size
    if size < 1000:
        raise ValueError("error report needs B * N >= 1000")
    flat = e.ravel()
    n = e.shape[1]
    kappa = excess_kurtosis(flat)
    window = vasicek_window(size)
    kl = kl_to_gaussian(flat, v_claimed, window)
    ac = lag_autocorrelation(e, lags)
    limit = 3.0 / math.sqrt(n)
    lo, hi = KL_NULL_BAND
    return GaussianityReport(
        sample_size=size, n=n, v_claimed=float(v_claimed),
        variance=float(np.mean(flat * flat)),
        excess_kurtosis=kappa, kl_nats=kl, kl_window=window,
        autocorrelation=[float(a) for a in ac],
        max_abs_autocorrelation=float(np.max(np.abs(ac))),
        autocorrelation_limit=limit,
        pass_kurtosis=abs(kappa) < KURTOSIS_LIMIT,
        pass_kl=lo <= kl <= hi,
        pass_autocorrelation=bool(np.max(np.abs(ac)) < limit),
    )
