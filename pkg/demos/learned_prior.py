"""Train a pairwise score network and use it as the prior module.

The prior couples coordinates in pairs with correlation 0.9.  A small
network is trained by denoising score matching (shortened schedule so the
demo runs in well under a minute), then SC-VAMP runs with the learned
score and with the exact score for comparison.

    python demos/learned_prior.py [ITERATIONS]
"""

import sys
import tempfile
from pathlib import Path

from scvamp.dsm import DsmConfig, save_weights, train_dsm
from scvamp.experiments import ExperimentConfig, run_experiment, score_report
from scvamp.score_models import PairwiseGaussianPrior

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
prior = PairwiseGaussianPrior(1.0, 0.9)
net, report = train_dsm(lambda r, c: prior.sample_prior(r, (c, 2)),
                        DsmConfig(iterations=steps, arch=(3, 64, 64, 2), checkpoint_every=500))
print(f"trained {steps} steps in {report.wall_clock:.1f}s, final loss {report.final_loss:.4f}")
error, _ = score_report(net, prior, seed=1, count=20_000)
print(f"relative score error against the exact score: {error:.2%}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "weights.json"
    save_weights(net, path)
    base = {"kind": "correlated-learned", "n": 1000, "m": 500, "batch": 100,
            "iterations": 8, "se_batch": 100}
    for score, extra in (("learned", {"weights": str(path)}), ("analytic", {})):
        res = run_experiment(ExperimentConfig.from_dict({**base, "score": score, **extra}))
        print(f"{score:9s} final mse {res.summary['final_mse']:.4f}  "
              f"SE {res.summary['final_mse_se']:.4f}")
