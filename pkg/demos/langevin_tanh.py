"""Nonlinear observations handled by a Langevin observation module.

y = tanh(A x) + noise has no closed-form posterior.  Module A estimates its
posterior mean and Onsager coefficient from unadjusted Langevin chains;
Module B is the exact Gaussian prior.

    python demos/langevin_tanh.py
"""

from scvamp.experiments import ExperimentConfig, run_experiment

cfg = ExperimentConfig.from_dict({"kind": "langevin-demo", "iterations": 6})
res = run_experiment(cfg)
print(f"N={cfg.n}  M={cfg.m}  noise_var={res.summary['noise_var']:.3g}  "
      f"step_scale={res.summary['langevin']['step_scale']}")
for row in res.trace[1:]:
    print(f"t={row['iter']}  mse={row['mse_actual']:.4f}  alpha_A={row['alpha_A']:.3f}  "
          f"v_out_A={row['v_out_A']:.4f}")
