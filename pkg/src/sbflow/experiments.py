"""Experiment runners shared by the command line, the demos and the acceptance suite."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import analytic, train
from .config import ExperimentConfig
from .data_metrics import DatasetSpec, empirical_cov, make_batch, msd, sampler_for, w2_mean_sd
from .net import BACKWARD, FORWARD
from .numerics import RngState
from .sampler import euler_maruyama, path_energy, pf_ode
from .train import BridgeModel, LossMeter, MetricsLog

# RNG streams derived from the run seed
STREAM_INIT, STREAM_TRAIN, STREAM_EVAL = 0, 1, 2


def gaussian_sigma(spec: DatasetSpec) -> float | None:
    if spec.name in ("gaussian", "antithetic_gaussian"):
        return spec.sigma
    return None


def evaluate(model: BridgeModel, cfg: ExperimentConfig, rng: RngState, ema: bool | None = None,
             full: bool = True) -> dict:
    """Evaluation metrics for the current model.

    ``cov_hat`` pairs source samples with forward-SDE outputs. With ``full``
    the probability-flow metrics (W2 against fresh target draws, path energy,
    MSD) and, for Gaussian endpoints, the drift-sum consistency residual are
    added.
    """
    ev = cfg.eval
    use_ema = cfg.train.sample_with_ema if ema is None else ema
    field = model.field(ema=use_ema)
    pi0, pi1 = sampler_for(cfg.source), sampler_for(cfg.target)
    x0 = pi0(ev.n_eval, rng)
    x1_sde = euler_maruyama(field, x0, ev.sde_steps, cfg.train.eps, rng, FORWARD,
                            store=False, t_min=cfg.train.t_min).final
    out = {"cov_hat": empirical_cov(x0, x1_sde)}
    if not full:
        return out
    n_w2 = min(ev.n_eval, 1000)

    def gen(n, r):
        return pf_ode(field, pi0(n, r), ev.pf_steps, store=False, t_min=cfg.train.t_min).final

    out["w2_mean"], out["w2_sd"] = w2_mean_sd(gen, pi1, n_w2, ev.w2_repeats, rng)
    out["path_energy"] = path_energy(field, x0, ev.energy_steps, t_min=cfg.train.t_min)
    x1_pf = pf_ode(field, x0, ev.pf_steps, store=False, t_min=cfg.train.t_min).final
    out["msd"] = msd(x0, x1_pf)
    s0, s1 = gaussian_sigma(cfg.source), gaussian_sigma(cfg.target)
    if s0 is not None and s1 is not None:
        c01 = analytic.gaussian_eot_cross_cov(s0, s1, cfg.train.eps)
        score = analytic.gaussian_score(s0, s1, c01, cfg.train.eps)
        probe = np.sqrt(analytic.gaussian_marginal_var(ev.consistency_t, s0, s1, c01,
                                                       cfg.train.eps)) * rng.normal(x0.shape)
        out["consistency_residual"] = analytic.consistency_residual(
            field, ev.consistency_t, probe, cfg.train.eps, score)
    return out


def backward_cov(model: BridgeModel, cfg: ExperimentConfig, rng: RngState,
                 ema: bool | None = None) -> float:
    use_ema = cfg.train.sample_with_ema if ema is None else ema
    x1 = sampler_for(cfg.target)(cfg.eval.n_eval, rng)
    x0 = euler_maruyama(model.field(ema=use_ema), x1, cfg.eval.sde_steps, cfg.train.eps, rng,
                        BACKWARD, store=False, t_min=cfg.train.t_min).final
    return empirical_cov(x0, x1)


@dataclass
class RunResult:
    model: BridgeModel
    log: MetricsLog
    rng: RngState
    stopped_early: bool = False


class _Stop(Exception):
    def __init__(self, model):
        super().__init__("stopped by callback")
        self.model = model


def _eval_callback(cfg, log: MetricsLog, phase_total: int, full_eval: bool, ema,
                   extra: Callable | None):
    meter = LossMeter()
    every = cfg.eval.eval_every

    def cb(step, phase, model, lf, lb):
        meter.update(lf, lb)
        if (every and step % every == 0) or step == phase_total:
            f, b = meter.means()
            # a fresh eval stream each time: all evaluations see the same draws
            metrics = evaluate(model, cfg, RngState(cfg.train.seed, STREAM_EVAL), ema=ema,
                               full=full_eval)
            log.add(step=step, phase=phase, loss_fwd=f, loss_bwd=b, **metrics)
            # a truthy return from ``extra`` ends the phase after this evaluation
            if extra is not None and extra(step, phase, model, log.rows[-1]):
                raise _Stop(model)
    return cb


def init_model(cfg: ExperimentConfig) -> BridgeModel:
    return BridgeModel.init(cfg.net, RngState(cfg.train.seed, STREAM_INIT),
                            cfg.train.ema_decay, two_networks=cfg.run.two_networks)


def run_pretrain(cfg: ExperimentConfig, model: BridgeModel | None = None,
                 rng: RngState | None = None, full_eval: bool = True, ema=None,
                 extra: Callable | None = None, record_wallclock: bool = True) -> RunResult:
    model = model or init_model(cfg)
    rng = rng or RngState(cfg.train.seed, STREAM_TRAIN)
    log = MetricsLog(record_wallclock=record_wallclock)
    pi0, pi1 = sampler_for(cfg.source), sampler_for(cfg.target)
    coupling = None
    if cfg.run.coupling == "antithetic":
        if cfg.source.name not in ("gaussian", "antithetic_gaussian"):
            raise ValueError("antithetic coupling needs a Gaussian source")
        anti = dataclasses.replace(cfg.source, name="antithetic_gaussian")
        coupling = lambda n, r: make_batch(anti, n, r)  # noqa: E731
    cb = _eval_callback(cfg, log, cfg.train.n_pretrain, full_eval, ema, extra)
    try:
        model = train.pretrain(cfg.train, model, pi0, pi1, rng, coupling_sampler=coupling,
                               callback=cb)
    except _Stop as stop:
        return RunResult(stop.model, log, rng, stopped_early=True)
    return RunResult(model, log, rng)


def run_finetune(cfg: ExperimentConfig, model: BridgeModel, rng: RngState | None = None,
                 full_eval: bool = True, ema=None, extra: Callable | None = None,
                 record_wallclock: bool = True) -> RunResult:
    rng = rng or RngState(cfg.train.seed, STREAM_TRAIN)
    log = MetricsLog(record_wallclock=record_wallclock)
    pi0, pi1 = sampler_for(cfg.source), sampler_for(cfg.target)
    tc = cfg.train if ema is None else dataclasses.replace(cfg.train, sample_with_ema=ema)
    cb = _eval_callback(cfg, log, tc.n_finetune, full_eval, ema, extra)
    mode = cfg.run.mode
    try:
        if mode == "online":
            model = train.finetune_online(tc, model, pi0, pi1, rng, callback=cb)
        elif mode == "iterative":
            model = train.finetune_iterative(tc, model, pi0, pi1, rng, cfg.run.swap_every,
                                             callback=cb)
        else:
            cap = cfg.run.capacity or tc.half_batch
            model = train.finetune_replay(tc, model, pi0, pi1, rng, cap, cfg.run.n_refresh,
                                          callback=cb)
    except _Stop as stop:
        return RunResult(stop.model, log, rng, stopped_early=True)
    return RunResult(model, log, rng)


def first_step_in_band(log: MetricsLog, target: float, tol: float) -> int | None:
    for r in log.rows:
        if r["cov_hat"] is not None and abs(r["cov_hat"] - target) <= tol:
            return int(r["step"])
    return None


def write_outputs(out_dir, name: str, result: RunResult, cfg: ExperimentConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.log.write_csv(out / f"metrics_{name}.csv")
    ckpt = out / f"{name}.npz"
    train.save_model(ckpt, result.model, result.rng,
                     meta={"label": cfg.run.label, "phase": name, "seed": cfg.train.seed})
    return ckpt


def is_finite_row(row: dict) -> bool:
    return all(v is None or not isinstance(v, float) or math.isfinite(v) for v in row.values())
