"""Textbook VAMP with Jacobian-trace divergences, written with dense algebra.

Used as an independent oracle for the score-driven implementation: no
scores, no Fisher information, no SVD-basis shortcuts.
"""

import numpy as np


def lmmse_dense(a, noise_var, x_in, v_in, y):
    n = a.shape[1]
    cov = np.linalg.inv(np.eye(n) / v_in + a.T @ a / noise_var)
    x_hat = (x_in / v_in + y @ a / noise_var) @ cov.T
    return x_hat, cov


def alpha_jacobian_trace(a, noise_var, v_in):
    """Average diagonal of d x_hat / d x_in = Sigma_post / v_in."""
    n = a.shape[1]
    _, cov = lmmse_dense(a, noise_var, np.zeros(n), v_in, np.zeros(a.shape[0]))
    return float(np.trace(cov / v_in)) / n


def standard_vamp_gaussian(a, noise_var, power, y, v_init, iterations):
    """Linear-Gaussian VAMP; the prior denoiser is ``P / (P + v) r`` with
    divergence ``P / (P + v)``.

    Returns a list of per-iteration dicts with the messages of both modules.
    """
    n = a.shape[1]
    x_b = np.zeros((y.shape[0], n))
    v_b = v_init
    out = []
    for _ in range(iterations):
        x_hat, cov = lmmse_dense(a, noise_var, x_b, v_b, y)
        alpha_a = float(np.trace(cov)) / (n * v_b)
        x_a = (x_hat - alpha_a * x_b) / (1 - alpha_a)
        v_a = v_b * alpha_a / (1 - alpha_a)
        gain = power / (power + v_a)
        x_post = gain * x_a
        alpha_b = gain
        new_x_b = (x_post - alpha_b * x_a) / (1 - alpha_b)
        new_v_b = v_a * alpha_b / (1 - alpha_b)
        out.append({"x_a": x_a, "v_a": v_a, "x_b": new_x_b, "v_b": new_v_b,
                    "alpha_a": alpha_a, "alpha_b": alpha_b, "x_post": x_post})
        x_b, v_b = new_x_b, new_v_b
    return out
