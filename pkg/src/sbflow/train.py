"""Bridge-matching pretraining and online / iterative / replay finetuning.

A :class:`BridgeModel` holds either one direction-conditioned network
(``"bi"``) or a forward/backward pair (``"fwd"``, ``"bwd"``). Every update
goes through :func:`_update`, which receives the two training couplings:

* forward pairs ``(X0_hat, X1)``: ``X1`` is always a true target sample;
* backward pairs ``(X0, X1_hat)``: ``X0`` is always a true source sample.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import net
from .bridge import build_loss_batch
from .net import BACKWARD, FORWARD, T_MIN, NetSpec, NonFiniteLoss, TrainState
from .numerics import CouplingBatch, RngState
from .sampler import TwoNetField, euler_maruyama

Sampler = Callable[[int, RngState], np.ndarray]

METRICS_COLUMNS = ("step", "phase", "loss_fwd", "loss_bwd", "cov_hat", "w2_mean", "w2_sd",
                   "path_energy", "msd", "consistency_residual", "wallclock_s")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, phase: str, cause: Exception):
        super().__init__(f"{phase} step {step}: {cause}")
        self.step = step
        self.phase = phase


@dataclass(frozen=True)
class TrainConfig:
    eps: float = 1.0
    batch_size: int = 128
    n_pretrain: int = 1000
    n_finetune: int = 1000
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-4
    ema_decay: float = 0.999
    sample_with_ema: bool = True
    n_em_steps: int = 100
    t_min: float = T_MIN
    seed: int = 0
    grad_clip: float = 1.0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.n_pretrain < 0 or self.n_finetune < 0 or self.n_em_steps < 1:
            raise ValueError("step counts must be non-negative (n_em_steps >= 1)")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def half_batch(self) -> int:
        return self.batch_size // 2


# --------------------------------------------------------------------------
# model container


@dataclass(frozen=True)
class BridgeModel:
    states: dict
    step: int = 0

    @classmethod
    def init(cls, spec: NetSpec, rng: RngState, ema_decay: float = 0.999,
             two_networks: bool = False) -> "BridgeModel":
        if two_networks:
            one = dataclasses.replace(spec, bidirectional=False)
            return cls({"fwd": TrainState.create(net.init_vector_field(one, rng), ema_decay),
                        "bwd": TrainState.create(net.init_vector_field(one, rng), ema_decay)})
        two = dataclasses.replace(spec, bidirectional=True)
        return cls({"bi": TrainState.create(net.init_vector_field(two, rng), ema_decay)})

    @property
    def bidirectional(self) -> bool:
        return "bi" in self.states

    def field(self, ema: bool = True):
        pick = (lambda st: st.ema_params) if ema else (lambda st: st.params)
        if self.bidirectional:
            return pick(self.states["bi"])
        return TwoNetField(pick(self.states["fwd"]), pick(self.states["bwd"]))

    def reset_optimizers(self) -> "BridgeModel":
        return dataclasses.replace(
            self, states={k: s.reset_optimizer() for k, s in self.states.items()})

    def params_for(self, direction: int, ema: bool = False):
        st = self.states["bi"] if self.bidirectional else \
            self.states["fwd" if direction == FORWARD else "bwd"]
        return st.ema_params if ema else st.params


def save_model(path, model: BridgeModel, rng: RngState | None = None, meta: dict | None = None):
    info = dict(meta or {})
    info["model_step"] = model.step
    if rng is not None:
        info["rng"] = {"seed": rng.seed, "stream_id": rng.stream_id, "counter": rng.counter}
    net.save_checkpoint(path, model.states, info)


def load_model(path) -> tuple[BridgeModel, RngState | None, dict]:
    states, meta = net.load_checkpoint(path)
    if set(states) not in ({"bi"}, {"fwd", "bwd"}):
        raise ValueError(f"checkpoint holds unexpected networks {sorted(states)}")
    r = meta.get("rng")
    rng = RngState(r["seed"], r["stream_id"], r["counter"]) if r else None
    return BridgeModel(states, int(meta.get("model_step", 0))), rng, meta


# --------------------------------------------------------------------------
# one optimisation step


def _lr_at(base: float, k: int, warmup: int) -> float:
    return base * min(1.0, (k + 1) / warmup) if warmup > 0 else base


def _apply(st: TrainState, grad: np.ndarray, lr: float, clip: float) -> TrainState:
    grad = net.clip_grad_global_norm(grad, clip)
    return net.ema_update(net.adam_step(st, grad, lr))


def _update(model: BridgeModel, cf: CouplingBatch | None, cb: CouplingBatch | None,
            rng: RngState, cfg: TrainConfig, lr: float) -> tuple[BridgeModel, float, float]:
    """One gradient step on the bridge-matching losses of the given couplings.

    Returns the model and the (forward, backward) losses before the step;
    an absent direction reports ``nan``.
    """
    lb = build_loss_batch(cf, cb, rng, cfg.eps, cfg.t_min)
    nf = lb.n_fwd
    states = dict(model.states)
    if model.bidirectional:
        st = states["bi"]
        _, grad, rows = net.loss_and_grad(st.params, lb.s, lb.t_net, lb.x_t, lb.target,
                                          return_rows=True)
        states["bi"] = _apply(st, grad, lr, cfg.grad_clip)
        lf = float(rows[:nf].mean()) if nf else math.nan
        lbk = float(rows[nf:].mean()) if nf < rows.size else math.nan
    else:
        lf = lbk = math.nan
        if nf:
            st = states["fwd"]
            lf, grad = net.loss_and_grad(st.params, FORWARD, lb.t_net[:nf], lb.x_t[:nf],
                                         lb.target[:nf])
            states["fwd"] = _apply(st, grad, lr, cfg.grad_clip)
        if nf < lb.s.size:
            st = states["bwd"]
            lbk, grad = net.loss_and_grad(st.params, BACKWARD, lb.t_net[nf:], lb.x_t[nf:],
                                          lb.target[nf:])
            states["bwd"] = _apply(st, grad, lr, cfg.grad_clip)
    return BridgeModel(states, model.step + 1), lf, lbk


def training_pairs(x0, x1, x0_gen, x1_gen) -> tuple[CouplingBatch, CouplingBatch]:
    """Forward pairs ``(x0_gen, x1)`` and backward pairs ``(x0, x1_gen)``.

    The regression endpoint of each loss is the true sample: forward targets
    point at ``x1`` and backward targets at ``x0``.
    """
    return CouplingBatch(x0_gen, x1), CouplingBatch(x0, x1_gen)


# --------------------------------------------------------------------------
# coupling generators


def sde_generate(model: BridgeModel, x0, x1, rng: RngState, cfg: TrainConfig):
    """``(X0_hat, X1_hat)``: backward SDE from ``x1`` and forward SDE from ``x0``.

    Pure sampling, so no gradient flows through it.
    """
    f = model.field(ema=cfg.sample_with_ema)
    if model.bidirectional:
        b = x0.shape[0]
        s = np.concatenate([np.full(b, float(FORWARD)), np.full(x1.shape[0], float(BACKWARD))])
        traj = euler_maruyama(f, np.concatenate([x0, x1]), cfg.n_em_steps, cfg.eps, rng,
                              direction=s, store=False, t_min=cfg.t_min)
        out = traj.final
        return out[b:], out[:b]
    x1_hat = euler_maruyama(f, x0, cfg.n_em_steps, cfg.eps, rng, FORWARD, store=False,
                            t_min=cfg.t_min).final
    x0_hat = euler_maruyama(f, x1, cfg.n_em_steps, cfg.eps, rng, BACKWARD, store=False,
                            t_min=cfg.t_min).final
    return x0_hat, x1_hat


def independent_generate(pi0: Sampler, pi1: Sampler):
    """Generator that ignores the model and returns fresh independent draws."""
    def gen(model, x0, x1, rng, cfg):
        return pi0(x1.shape[0], rng), pi1(x0.shape[0], rng)
    return gen


# --------------------------------------------------------------------------
# training phases

StepCallback = Callable[[int, str, BridgeModel, float, float], None]


def _guard(step: int, phase: str, fn):
    try:
        return fn()
    except (NonFiniteLoss, FloatingPointError) as exc:
        raise TrainingDiverged(step, phase, exc) from exc


def pretrain(cfg: TrainConfig, model: BridgeModel, pi0: Sampler, pi1: Sampler,
             rng: RngState, coupling_sampler: Callable[[int, RngState], CouplingBatch] | None = None,
             callback: StepCallback | None = None) -> BridgeModel:
    """Bridge matching on a fixed coupling (independent unless ``coupling_sampler`` is given).

    With a coupling sampler, a batch of ``B`` pairs is split into a forward
    half and a backward half.
    """
    gen = independent_generate(pi0, pi1)
    b = cfg.half_batch
    for k in range(cfg.n_pretrain):
        lr = _lr_at(cfg.lr_pretrain, k, cfg.warmup_steps)
        if coupling_sampler is None:
            x0, x1 = pi0(b, rng), pi1(b, rng)
            cf, cb = training_pairs(x0, x1, *gen(model, x0, x1, rng, cfg))
        else:
            pairs = coupling_sampler(cfg.batch_size, rng)
            cf, cb = pairs.take(slice(0, b)), pairs.take(slice(b, 2 * b))
        model, lf, lbk = _guard(k, "pretrain", lambda: _update(model, cf, cb, rng, cfg, lr))
        if callback is not None:
            callback(k + 1, "pretrain", model, lf, lbk)
    return model


def finetune_online(cfg: TrainConfig, model: BridgeModel, pi0: Sampler, pi1: Sampler,
                    rng: RngState, generate=None,
                    callback: StepCallback | None = None) -> BridgeModel:
    """Online finetuning: every step samples fresh couplings from the current model."""
    gen = generate or sde_generate
    model = model.reset_optimizers()
    b = cfg.half_batch
    for k in range(cfg.n_finetune):
        x0, x1 = pi0(b, rng), pi1(b, rng)
        x0_hat, x1_hat = _guard(k, "finetune", lambda: gen(model, x0, x1, rng, cfg))
        cf, cb = training_pairs(x0, x1, x0_hat, x1_hat)
        model, lf, lbk = _guard(k, "finetune",
                                lambda: _update(model, cf, cb, rng, cfg, cfg.lr_finetune))
        if callback is not None:
            callback(k + 1, "finetune", model, lf, lbk)
    return model


def active_direction(k: int, swap_every: int) -> int:
    """Direction trained at finetuning step ``k``: forward first, switching every ``swap_every``."""
    if swap_every < 1:
        raise ValueError("swap_every must be >= 1")
    return FORWARD if (k // swap_every) % 2 == 0 else BACKWARD


def finetune_iterative(cfg: TrainConfig, model: BridgeModel, pi0: Sampler, pi1: Sampler,
                       rng: RngState, swap_every: int,
                       callback: StepCallback | None = None) -> BridgeModel:
    """Alternating finetuning: train one direction on couplings generated by the other.

    Each step uses a full batch of ``B`` pairs for the active direction. With
    two networks the inactive one (and its EMA) is left untouched.
    """
    model = model.reset_optimizers()
    B = cfg.batch_size
    for k in range(cfg.n_finetune):
        d = active_direction(k, swap_every)
        f = model.field(ema=cfg.sample_with_ema)
        if d == FORWARD:
            x1 = pi1(B, rng)
            x0_hat = _guard(k, "finetune", lambda: euler_maruyama(
                f, x1, cfg.n_em_steps, cfg.eps, rng, BACKWARD, store=False,
                t_min=cfg.t_min).final)
            cf, cb = CouplingBatch(x0_hat, x1), None
        else:
            x0 = pi0(B, rng)
            x1_hat = _guard(k, "finetune", lambda: euler_maruyama(
                f, x0, cfg.n_em_steps, cfg.eps, rng, FORWARD, store=False,
                t_min=cfg.t_min).final)
            cf, cb = None, CouplingBatch(x0, x1_hat)
        model, lf, lbk = _guard(k, "finetune",
                                lambda: _update(model, cf, cb, rng, cfg, cfg.lr_finetune))
        if callback is not None:
            callback(k + 1, "finetune", model, lf, lbk)
    return model


# --------------------------------------------------------------------------
# replay buffer


@dataclass(frozen=True)
class ReplayBuffer:
    capacity: int
    x0: np.ndarray
    x1: np.ndarray

    @classmethod
    def empty(cls, capacity: int, d: int) -> "ReplayBuffer":
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        return cls(capacity, np.empty((0, d)), np.empty((0, d)))

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def buffer_add(buf: ReplayBuffer, pairs: CouplingBatch, rng: RngState | None = None) -> ReplayBuffer:
    """Append ``pairs`` and evict the oldest entries beyond capacity (FIFO)."""
    if pairs.d != buf.x0.shape[1]:
        raise ValueError("pair dimension does not match buffer")
    x0 = np.concatenate([buf.x0, pairs.x0])[-buf.capacity:]
    x1 = np.concatenate([buf.x1, pairs.x1])[-buf.capacity:]
    return ReplayBuffer(buf.capacity, x0, x1)


def buffer_sample(buf: ReplayBuffer, k: int, rng: RngState) -> CouplingBatch:
    """``k`` distinct stored pairs chosen uniformly.

    Asking for the whole buffer returns it in stored order without touching ``rng``.
    """
    if k < 1 or k > buf.size:
        raise ValueError(f"cannot sample {k} pairs from a buffer holding {buf.size}")
    if k == buf.size:
        return CouplingBatch(buf.x0.copy(), buf.x1.copy())
    idx = rng.choice(buf.size, k)
    return CouplingBatch(buf.x0[idx], buf.x1[idx])


def finetune_replay(cfg: TrainConfig, model: BridgeModel, pi0: Sampler, pi1: Sampler,
                    rng: RngState, capacity: int, n_refresh: int = 1, generate=None,
                    callback: StepCallback | None = None) -> BridgeModel:
    """Finetuning from forward/backward replay buffers refreshed every ``n_refresh`` steps."""
    if n_refresh < 1:
        raise ValueError("n_refresh must be >= 1")
    gen = generate or sde_generate
    model = model.reset_optimizers()
    b = cfg.half_batch
    d = model.params_for(FORWARD).spec.input_dim
    buf_f, buf_b = ReplayBuffer.empty(capacity, d), ReplayBuffer.empty(capacity, d)
    for k in range(cfg.n_finetune):
        if k % n_refresh == 0:
            x0, x1 = pi0(b, rng), pi1(b, rng)
            x0_hat, x1_hat = _guard(k, "finetune", lambda: gen(model, x0, x1, rng, cfg))
            pf, pb = training_pairs(x0, x1, x0_hat, x1_hat)
            buf_f, buf_b = buffer_add(buf_f, pf, rng), buffer_add(buf_b, pb, rng)
        cf, cb = buffer_sample(buf_f, b, rng), buffer_sample(buf_b, b, rng)
        model, lf, lbk = _guard(k, "finetune",
                                lambda: _update(model, cf, cb, rng, cfg, cfg.lr_finetune))
        if callback is not None:
            callback(k + 1, "finetune", model, lf, lbk)
    return model


# --------------------------------------------------------------------------
# metrics stream


@dataclass
class MetricsLog:
    """Rows of the metrics CSV; missing metrics are written as empty fields."""

    rows: list = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)
    record_wallclock: bool = True

    def add(self, **values) -> dict:
        unknown = set(values) - set(METRICS_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        row = {c: values.get(c) for c in METRICS_COLUMNS}
        if row["wallclock_s"] is None and self.record_wallclock:
            row["wallclock_s"] = time.perf_counter() - self.t0
        self.rows.append(row)
        return row

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else _fmt(r[c]) for c in METRICS_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class LossMeter:
    """Running means of the two direction losses between evaluations."""

    def __init__(self):
        self.reset()

    def reset(self):
        self._f, self._b, self._nf, self._nb = 0.0, 0.0, 0, 0

    def update(self, lf: float, lb: float):
        if not math.isnan(lf):
            self._f += lf
            self._nf += 1
        if not math.isnan(lb):
            self._b += lb
            self._nb += 1

    def means(self) -> tuple[float | None, float | None]:
        out = (self._f / self._nf if self._nf else None, self._b / self._nb if self._nb else None)
        self.reset()
        return out
