"""Pairwise score network trained by denoising score matching.

The network maps ``(r1, r2, sigma)`` to a 2-vector score estimate through
three softplus hidden layers and a linear output layer.  Forward and
backward passes, Adam and the schedule are written directly in numpy so
the training loop is fully deterministic for a given seed.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import RngStream, deterministic_blas, matmul
from .score_models import ScoreModel

__all__ = [
    "DEFAULT_ARCH",
    "MlpScoreNet",
    "DsmConfig",
    "TrainingReport",
    "AdamState",
    "TrainingDiverged",
    "WeightFileError",
    "init_mlp",
    "mlp_forward",
    "dsm_loss",
    "dsm_gradient",
    "adam_step",
    "cosine_lr",
    "train_dsm",
    "save_weights",
    "load_weights",
    "LearnedPairScore",
    "relative_score_error",
]

DEFAULT_ARCH = (3, 128, 128, 128, 2)
WEIGHT_FORMAT_VERSION = 1


def _softplus(z):
    # max(z, 0) + log1p(exp(-|z|)), computed in place on one buffer
    out = np.abs(z)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(z, 0.0)
    return out


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MlpScoreNet:
    """Weights ``W[i]`` have shape ``(arch[i], arch[i+1])``; layers act as
    ``h @ W + b``."""

    arch: tuple
    weights: list
    biases: list
    activation: str = "softplus"
    init: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.arch = tuple(int(a) for a in self.arch)
        if len(self.weights) != len(self.arch) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match the architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.arch[i], self.arch[i + 1]):
                raise ValueError(f"layer {i}: weight shape {w.shape} does not match "
                                 f"({self.arch[i]}, {self.arch[i + 1]})")
            if b.shape != (self.arch[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match "
                                 f"({self.arch[i + 1]},)")
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def params(self) -> list:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpScoreNet":
        return MlpScoreNet(self.arch, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.activation,
                           dict(self.init), self.seed)

    @classmethod
    def zeros(cls, arch=DEFAULT_ARCH) -> "MlpScoreNet":
        return cls(arch, [np.zeros((arch[i], arch[i + 1])) for i in range(len(arch) - 1)],
                   [np.zeros(arch[i + 1]) for i in range(len(arch) - 1)],
                   init={"scheme": "zeros"})

    def forward(self, inputs):
        h = np.asarray(inputs, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if i < last:
                h = _softplus(h)
        return h

    def _forward_cached(self, inputs):
        pre, post = [], [inputs]
        h = inputs
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = matmul(h, w) + b
            pre.append(z)
            h = _softplus(z) if i < last else z
            post.append(h)
        return pre, post


def init_mlp(rng: RngStream, arch=DEFAULT_ARCH) -> MlpScoreNet:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for i in range(len(arch) - 1):
        limit = math.sqrt(6.0 / (arch[i] + arch[i + 1]))
        weights.append(rng.uniform(size=(arch[i], arch[i + 1]), low=-limit, high=limit))
        biases.append(np.zeros(arch[i + 1]))
    return MlpScoreNet(arch, weights, biases,
                       init={"scheme": "glorot-uniform", "bias": "zeros"},
                       seed=rng.seed)


def _net_inputs(pair, sigma):
    pair = np.asarray(pair, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), pair.shape[:-1])
    return np.concatenate([pair, sig[..., None]], axis=-1)


def mlp_forward(net: MlpScoreNet, pair, sigma):
    """Score estimate for ``pair`` (shape ``(..., 2)``) at noise level ``sigma``."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    return net.forward(_net_inputs(pair, sigma))


def dsm_loss(net: MlpScoreNet, x0, z, sigma) -> float:
    """Batch mean of ``||s(x0 + z, sigma) + z / sigma^2||^2``.

    ``x0`` and ``z`` are ``(B, 2)``; ``sigma`` is scalar or ``(B,)``.
    """
    x0 = np.asarray(x0, dtype=float)
    z = np.asarray(z, dtype=float)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), x0.shape[:1])
    resid = mlp_forward(net, x0 + z, sig) + z / (sig ** 2)[:, None]
    return float(np.sum(resid * resid) / x0.shape[0])


def dsm_gradient(net: MlpScoreNet, x0, z, sigma):
    """Loss and its gradient, as a list aligned with ``net.params``."""
    x0 = np.asarray(x0, dtype=float)
    z = np.asarray(z, dtype=float)
    bsz = x0.shape[0]
    if bsz == 0:
        raise ValueError("empty batch")
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (bsz,))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    inputs = _net_inputs(x0 + z, sig)
    pre, post = net._forward_cached(inputs)
    resid = post[-1] + z / (sig ** 2)[:, None]
    loss = float(np.sum(resid * resid) / bsz)

    grads = [None] * (2 * len(net.weights))
    delta = 2.0 * resid / bsz
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = matmul(post[i].T, delta)
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = matmul(delta, net.weights[i].T) * _sigmoid(pre[i - 1])
    return loss, grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Single-cycle cosine annealing from ``lr0`` at ``t = 0`` to 0 at ``t = total``."""
    if total <= 0:
        return lr0
    if not 0 <= t <= total:
        raise ValueError("step outside [0, total]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True)
class DsmConfig:
    sigma_min: float = 0.01
    sigma_max: float = 3.0
    iterations: int = 20000
    batch: int = 256
    lr0: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1000
    arch: tuple = DEFAULT_ARCH
    antithetic: bool = True

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be >= 1 and iterations >= 0")
        if self.antithetic and self.batch % 2:
            raise ValueError("antithetic sampling needs an even batch")


@dataclass
class TrainingReport:
    checkpoints: list = field(default_factory=list)
    final_loss: float = math.nan
    wall_clock: float = 0.0
    seed: int = 0
    iterations: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report: TrainingReport):
        super().__init__(message)
        self.report = report


def train_dsm(sampler: Callable, config: DsmConfig = DsmConfig()):
    """Fit the pair network by DSM on fresh prior samples each step.

    ``sampler(rng, count)`` must return ``(count, 2)`` prior pairs.  The
    reported checkpoint loss is the mean batch loss over the preceding
    ``checkpoint_every`` steps.

    With ``antithetic=True`` each batch holds ``batch / 2`` draws of
    ``(x0, sigma, z)`` together with their mirrored copies ``(x0, sigma, -z)``.
    The loss is unchanged in expectation but the ``z / sigma^2`` target
    noise cancels to leading order in the gradient.
    """
    root = RngStream(config.seed)
    net = init_mlp(root.split("init"), config.arch)
    data_rng = root.split("data")
    state = AdamState(config.beta1, config.beta2, config.eps)
    report = TrainingReport(seed=config.seed)
    start = time.perf_counter()
    params = net.params
    with deterministic_blas():
        _train_loop(config, sampler, net, params, data_rng, state, report, start)
    report.iterations = config.iterations
    report.wall_clock = time.perf_counter() - start
    return net, report


def _train_loop(config, sampler, net, params, data_rng, state, report, start):
    window = []
    for t in range(config.iterations):
        draws = config.batch // 2 if config.antithetic else config.batch
        x0 = np.asarray(sampler(data_rng, draws), dtype=float)
        sigma = data_rng.uniform(size=draws, low=config.sigma_min,
                                 high=config.sigma_max)
        z = sigma[:, None] * data_rng.standard_normal((draws, 2))
        if config.antithetic:
            x0 = np.concatenate([x0, x0])
            sigma = np.concatenate([sigma, sigma])
            z = np.concatenate([z, -z])
        loss, grads = dsm_gradient(net, x0, z, sigma)
        if not math.isfinite(loss):
            report.wall_clock = time.perf_counter() - start
            report.iterations = t
            raise TrainingDiverged(f"non-finite loss at step {t}", report)
        adam_step(params, grads, state, cosine_lr(t, config.iterations, config.lr0))
        window.append(loss)
        if (t + 1) % config.checkpoint_every == 0 or t + 1 == config.iterations:
            report.checkpoints.append((t + 1, float(np.mean(window))))
            window = []
        report.final_loss = loss


def relative_score_error(net: MlpScoreNet, reference: ScoreModel, sampler: Callable,
                         rng: RngStream, sigmas=None, count: int = 100_000):
    """Relative RMS error of the network against a reference score model.

    For each ``sigma`` fresh pairs ``r = x0 + sigma z`` are drawn and the
    error is ``sqrt(mean ||s_net - s_ref||^2 / mean ||s_ref||^2)``.

    Returns
    -------
    mean_error : float
        Average of the per-sigma errors.
    per_sigma : list of (sigma, error)
    """
    if sigmas is None:
        sigmas = np.linspace(0.1, 3.0, 30)
    per = []
    for k, sig in enumerate(sigmas):
        sub = rng.split(f"sigma:{k}")
        x0 = np.asarray(sampler(sub, count), dtype=float)
        r = x0 + sig * sub.standard_normal(x0.shape)
        got = mlp_forward(net, r, sig)
        ref = reference.score(r, sig * sig)
        err = math.sqrt(np.sum((got - ref) ** 2) / np.sum(ref ** 2))
        per.append((float(sig), err))
    return float(np.mean([e for _, e in per])), per


class WeightFileError(ValueError):
    """Malformed, truncated or inconsistent weight file."""


def _fmt_array(a) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(a)) + "]"


def save_weights(net: MlpScoreNet, path) -> None:
    """Write the network as JSON text with 17 significant digits per float.

    The file is written to a temporary sibling and renamed into place.
    """
    head = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "arch": list(net.arch),
        "activation": net.activation,
        "init": net.init,
        "seed": net.seed,
    }
    ws = ",\n    ".join(_fmt_array(w) for w in net.weights)
    bs = ",\n    ".join(_fmt_array(b) for b in net.biases)
    body = json.dumps(head, indent=2, sort_keys=True)[:-2]
    text = (body + ',\n  "weights": [\n    ' + ws + '\n  ],\n  "biases": [\n    '
            + bs + "\n  ]\n}\n")
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".weights-", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_weights(path) -> MlpScoreNet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"{path}: cannot parse weight file ({exc})") from exc
    if not isinstance(doc, dict):
        raise WeightFileError(f"{path}: top level must be an object")
    version = doc.get("format_version")
    if version != WEIGHT_FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format_version {version!r}")
    for key in ("arch", "activation", "weights", "biases"):
        if key not in doc:
            raise WeightFileError(f"{path}: missing field {key!r}")
    try:
        arch = tuple(int(a) for a in doc["arch"])
        w_raw, b_raw = list(doc["weights"]), list(doc["biases"])
    except (TypeError, ValueError) as exc:
        raise WeightFileError(f"{path}: malformed header ({exc})") from exc
    if len(w_raw) != len(arch) - 1 or len(b_raw) != len(arch) - 1:
        raise WeightFileError(
            f"{path}: arch declares {len(arch) - 1} layers, file has "
            f"{len(w_raw)} weight and {len(b_raw)} bias arrays")
    weights, biases = [], []
    for i, (w, b) in enumerate(zip(w_raw, b_raw)):
        try:
            w = np.asarray(w, dtype=float)
            b = np.asarray(b, dtype=float)
        except (TypeError, ValueError) as exc:
            raise WeightFileError(f"{path}: layer {i}: non-numeric data") from exc
        if w.ndim != 1 or w.size != arch[i] * arch[i + 1]:
            raise WeightFileError(
                f"{path}: layer {i} declares {arch[i]}x{arch[i + 1]} weights, "
                f"found {w.size} values")
        if b.ndim != 1 or b.size != arch[i + 1]:
            raise WeightFileError(
                f"{path}: layer {i} declares {arch[i + 1]} biases, found {b.size}")
        weights.append(w.reshape(arch[i], arch[i + 1]))
        biases.append(b)
    return MlpScoreNet(arch, weights, biases, doc["activation"],
                       doc.get("init") or {}, doc.get("seed"))


class LearnedPairScore(ScoreModel):
    """Whole-signal score assembled from the pair network, one pair at a time.

    Pairs are ``(x_1, x_2), (x_3, x_4), ...``; the network is queried at
    ``sigma = sqrt(v_in)``.  ``prior`` (optional) supplies the sampler used
    by Monte Carlo state evolution.
    """

    kind = "learned-mlp"

    def __init__(self, net: MlpScoreNet, prior: ScoreModel | None = None,
                 chunk: int = 1 << 16):
        self.net = net
        self.prior = prior
        self.chunk = chunk

    def score(self, x_in, v_in, y=None):
        if not v_in > 0:
            raise ValueError("input variance must be positive")
        x = np.asarray(x_in, dtype=float)
        if x.shape[-1] % 2:
            raise ValueError("pair network needs an even dimension")
        pairs = x.reshape(-1, 2)
        sigma = math.sqrt(v_in)
        out = np.empty_like(pairs)
        for lo in range(0, pairs.shape[0], self.chunk):
            hi = lo + self.chunk
            out[lo:hi] = self.net.forward(_net_inputs(pairs[lo:hi], sigma))
        return out.reshape(x.shape)

    def sample_prior(self, rng, shape):
        if self.prior is None:
            raise NotImplementedError("learned score has no attached prior sampler")
        return self.prior.sample_prior(rng, shape)

    def prior_variance(self):
        return self.prior.prior_variance()

    def describe(self):
        return {"kind": self.kind, "arch": list(self.net.arch)}
