"""Standard normal to two moons, in two dimensions.

    python3 demos/moons_bridge.py [n_pretrain] [n_finetune]

Prints W2 to fresh moons draws, the probability-flow path energy and the mean
squared displacement after each phase, and writes the final samples to
``out/moons_samples.npz`` for plotting.
"""
import dataclasses
import sys
from pathlib import Path

import numpy as np

from sbflow import experiments
from sbflow.config import load_config
from sbflow.numerics import RngState
from sbflow.sampler import pf_ode
from sbflow.data_metrics import sampler_for

n_pre = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
n_ft = int(sys.argv[2]) if len(sys.argv) > 2 else 500

cfg = load_config("configs/moons.ini")
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, n_pretrain=n_pre,
                                                         n_finetune=n_ft),
                          eval=dataclasses.replace(cfg.eval, eval_every=0, w2_repeats=2))


def show(name, row):
    print(f"{name:9s} W2 {row['w2_mean']:.3f} +- {row['w2_sd']:.3f}   "
          f"energy {row['path_energy']:.3f}   msd {row['msd']:.3f}")


pre = experiments.run_pretrain(cfg)
show("pretrain", pre.log.rows[-1])
ft = experiments.run_finetune(cfg, pre.model, pre.rng)
show("finetune", ft.log.rows[-1])

rng = RngState(cfg.train.seed, 7)
x0 = sampler_for(cfg.source)(2000, rng)
x1 = pf_ode(ft.model.field(ema=True), x0, cfg.eval.pf_steps, store=False).final
out = Path("out")
out.mkdir(exist_ok=True)
np.savez(out / "moons_samples.npz", x0=x0, x1=x1)
print("samples written to", out / "moons_samples.npz")
