import math

import numpy as np
import pytest

from scvamp.message_passing import ScVampConfig
from scvamp.numerics import RngStream
from scvamp.score_models import BernoulliGaussianParams, GaussianPrior, PairwiseGaussianPrior
from scvamp.siso import DEFAULT_CLIP
from scvamp.state_evolution import (MmseFunction, bg_mmse, exit_curves, gaussian_mmse,
                                    linear_mmse, mmse_bg, mmse_from_score_model, run_se,
                                    scalar_gaussian_fixed_point, scalar_gaussian_mi, se_step,
                                    vector_gaussian_mi)


def test_se_step_gaussian_prior():
    alpha, v_post, v_out = se_step(1.0, gaussian_mmse(1.0))
    assert (alpha, v_post, v_out) == (0.5, 0.5, 1.0)


@pytest.mark.parametrize("v", [0.01, 0.7, 20.0])
def test_se_step_gaussian_likelihood_returns_noise_variance(v):
    assert se_step(v, gaussian_mmse(0.3))[2] == pytest.approx(0.3, rel=1e-12)


def test_se_step_uninformative_clips_high():
    alpha, _, v_out = se_step(2.0, MmseFunction(lambda v: v))
    assert alpha == DEFAULT_CLIP[1] and math.isfinite(v_out) and v_out > 1e5


def test_run_se_scalar_gaussian_immediate_fixed_point():
    tr = run_se(ScVampConfig(max_iterations=5, v_init=1.0, stop_tolerance=0.0),
                gaussian_mmse(0.25), gaussian_mmse(1.0))
    assert np.all(np.abs(tr.column("v_in_B")[1:] - 0.25) < 1e-12)


def test_run_se_zero_iterations():
    tr = run_se(ScVampConfig(max_iterations=0), gaussian_mmse(0.25), gaussian_mmse(1.0))
    assert len(tr.rows) == 1


def test_predicted_mse_is_v_in_b_times_alpha_b():
    p = BernoulliGaussianParams(0.1, 1.0)
    tr = run_se(ScVampConfig(max_iterations=6),
                linear_mmse(np.ones(50), 100, 0.01), bg_mmse(p))
    for row in tr.rows[1:]:
        assert row.predicted_mse == pytest.approx(row.v_in_B * row.alpha_B, rel=1e-14)
        assert min(row.v_in_A, row.v_out_A, row.v_out_B) > 0


def test_fixed_point_report():
    rep = scalar_gaussian_fixed_point(1.0, 0.25)
    assert rep.v_star == 0.25
    assert abs(rep.mutual_information_nats - 0.5 * math.log(5)) < 1e-12
    assert abs(rep.se_v_star - 0.25) < 1e-12
    assert scalar_gaussian_fixed_point(0.7, 0.7).mutual_information_nats == pytest.approx(
        0.5 * math.log(2), abs=1e-15)


def test_fixed_point_rejects_non_positive():
    with pytest.raises(ValueError):
        scalar_gaussian_fixed_point(0.0, 1.0)


def test_mmse_bg_special_cases():
    assert mmse_bg(1.0, BernoulliGaussianParams(1.0, 1.0)) == 0.5
    assert mmse_bg(1.0, BernoulliGaussianParams(0.0, 1.0)) == 0.0


def test_mmse_bg_against_monte_carlo():
    # independent oracle: sample the channel and apply the textbook
    # spike-and-slab posterior mean (mixture weights times Wiener gain)
    rho, var, v = 0.1, 1.0, 0.1
    rng = RngStream(11)
    total, total_sq, count = 0.0, 0.0, 0
    for _ in range(10):
        n = 10 ** 6
        x = (rng.uniform(size=n) < rho) * math.sqrt(var) * rng.standard_normal(n)
        r = x + math.sqrt(v) * rng.standard_normal(n)
        slab = rho * np.exp(-0.5 * r * r / (var + v)) / math.sqrt(var + v)
        spike = (1 - rho) * np.exp(-0.5 * r * r / v) / math.sqrt(v)
        x_hat = slab / (slab + spike) * var / (var + v) * r
        e = (x_hat - x) ** 2
        total += e.sum()
        total_sq += (e * e).sum()
        count += n
    mc = total / count
    se = math.sqrt((total_sq / count - mc * mc) / count)
    assert abs(mmse_bg(v, BernoulliGaussianParams(rho, var)) - mc) < 3 * se


@pytest.mark.parametrize("v", [1e-4, 0.01, 0.3, 2.0, 50.0])
def test_mmse_bg_bounds(v):
    m = mmse_bg(v, BernoulliGaussianParams(0.1, 1.0))
    assert 0 <= m <= min(v, 0.1)


def test_score_model_mmse_gaussian():
    m = mmse_from_score_model(GaussianPrior(1.0), 0.5, 10, 20_000, RngStream(1),
                              calibrate=False)
    assert m == pytest.approx(0.5 / 1.5, rel=0.02)


def test_score_model_mmse_pairwise_matches_2x2_algebra():
    prior = PairwiseGaussianPrior(1.0, 0.9)
    sigma = np.array([[1.0, 0.9], [0.9, 1.0]])
    post = sigma - sigma @ np.linalg.inv(sigma + np.eye(2)) @ sigma
    oracle = 0.5 * np.trace(post)
    m = mmse_from_score_model(prior, 1.0, 20, 20_000, RngStream(2), calibrate=False)
    assert m == pytest.approx(oracle, rel=0.02)


def test_score_model_mmse_tiny_variance_below_v():
    v = 1e-6
    assert mmse_from_score_model(PairwiseGaussianPrior(), v, 20, 2000, RngStream(3)) <= v


def test_vector_gaussian_mi():
    assert vector_gaussian_mi([1.0] * 3, 2.0, 0.5) == pytest.approx(3 * 0.5 * math.log(5))
    assert vector_gaussian_mi([0.0], 2.0, 0.5) == 0.0
    assert vector_gaussian_mi([4.0, 1.0], 1.0, 1.0) == pytest.approx(1.151293, abs=1e-6)
    with pytest.raises(ValueError):
        vector_gaussian_mi([-1.0], 1.0, 1.0)


def test_i_mmse_relation():
    p = 1.0
    mmse = gaussian_mmse(p)
    for v in (0.1, 0.5, 2.0):
        h = 1e-5 * v
        deriv = (scalar_gaussian_mi(p, v + h) - scalar_gaussian_mi(p, v - h)) / (2 * h)
        assert abs(deriv + mmse(v) / (2 * v * v)) < 1e-6


def test_linear_mmse_matches_dense_trace():
    rng = RngStream(4)
    m, n, nv = 6, 10, 0.2
    d = rng.uniform(size=m, low=0.2, high=2.0)
    a = np.zeros((m, n))
    a[np.arange(m), np.arange(m)] = d
    for v in (0.1, 1.0, 5.0):
        cov = np.linalg.inv(np.eye(n) / v + a.T @ a / nv)
        assert linear_mmse(d, n, nv)(v) == pytest.approx(np.trace(cov) / n, rel=1e-12)


def test_exit_curves_scalar_gaussian():
    grid = np.logspace(-2, 1, 25)
    chart = exit_curves(gaussian_mmse(0.25), gaussian_mmse(1.0), grid)
    assert np.max(np.abs(chart.curve_a - 0.25)) < 1e-9
    assert np.max(np.abs(chart.curve_b - 1.0)) < 1e-9
    v_in_a, v_out_a = chart.limit
    assert abs(v_in_a - 1.0) < 1e-9 and abs(v_out_a - 0.25) < 1e-9
    assert {r[0] for r in chart.rows()} == {"curve_A", "curve_B", "staircase_A", "staircase_B"}


def test_exit_linear_unit_spectrum_is_constant():
    # orthonormal rows, delta = 0.5: half the modes see sigma2, the other half
    # keep v; compare the curve with that two-mode closed form
    n, m, nv = 200, 100, 0.05
    grid = np.logspace(-2, 1, 9)
    chart = exit_curves(linear_mmse(np.ones(m), n, nv), gaussian_mmse(1.0), grid)
    for v, out in zip(grid, chart.curve_a):
        mm = 0.5 / (1 / v + 1 / nv) + 0.5 * v
        alpha = mm / v
        assert out == pytest.approx(v * alpha / (1 - alpha), rel=1e-12)


def test_staircase_matches_bisection_intersection():
    p = BernoulliGaussianParams(0.1, 1.0)
    fa, fb = linear_mmse(np.ones(100), 200, 0.01), bg_mmse(p)
    chart = exit_curves(fa, fb, np.logspace(-3, 0, 10), v_init=1.0, steps=200)
    # fixed point: v = out_B(out_A(v)); bisect on log scale from the staircase bracket
    g = lambda v: se_step(se_step(v, fa)[2], fb)[2] - v
    lo, hi = 1e-6, chart.limit[0] * 1.5
    assert g(hi) < 0
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if g(mid) < 0:
            hi = mid
        else:
            lo = mid
    assert chart.limit[0] == pytest.approx(hi, rel=1e-6)
