"""Pretrain on the antithetic coupling, then finetune online, and watch the
cross-covariance between source and forward samples approach the entropic
OT value.

    python3 demos/gaussian_coupling.py [n_pretrain] [n_finetune]

The defaults are a short run (a few minutes); configs/gaussian_d5.ini holds
the full budget.
"""
import dataclasses
import sys

from sbflow import analytic, experiments
from sbflow.config import load_config

n_pre = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
n_ft = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

cfg = load_config("configs/gaussian_d5.ini")
cfg = dataclasses.replace(
    cfg,
    train=dataclasses.replace(cfg.train, n_pretrain=n_pre, n_finetune=n_ft),
    eval=dataclasses.replace(cfg.eval, eval_every=500, n_eval=4000),
)
target = analytic.gaussian_eot_cross_cov(1.0, 1.0, cfg.train.eps)
print(f"target cross-covariance {target:.4f}")

pre = experiments.run_pretrain(cfg, full_eval=False)
print(f"after pretraining: {pre.log.rows[-1]['cov_hat']:.4f}  (the training coupling has -1)")


def report(step, phase, model, row):
    print(f"  finetune step {step:6d}  cov {row['cov_hat']:.4f}")


ft = experiments.run_finetune(cfg, pre.model, pre.rng, full_eval=False, extra=report)
hit = experiments.first_step_in_band(ft.log, target, 0.05)
print("first evaluation within 0.05:", hit)
