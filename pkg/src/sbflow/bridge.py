"""Stochastic interpolants, bridge-matching targets and the bidirectional loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import net
from .net import BACKWARD, FORWARD, T_MIN, VectorFieldParams
from .numerics import CouplingBatch, RngState


@dataclass(frozen=True)
class InterpolantSchedule:
    """``X_t = alpha(t) X0 + beta(t) X1 + gamma(t) Z`` with its time derivatives."""

    alpha: Callable
    beta: Callable
    gamma: Callable
    alpha_dot: Callable
    beta_dot: Callable
    gamma_dot: Callable

    @classmethod
    def brownian(cls, sigma0: float = 1.0) -> "InterpolantSchedule":
        """Bridge of ``sigma0 * B_t``: gamma(t) = sigma0 sqrt(t(1-t))."""
        s = float(sigma0)

        def gamma(t):
            return s * np.sqrt(t * (1.0 - t))

        def gamma_dot(t):
            return s * (1.0 - 2.0 * t) / (2.0 * np.sqrt(t * (1.0 - t)))

        return cls(alpha=lambda t: 1.0 - t, beta=lambda t: t, gamma=gamma,
                   alpha_dot=lambda t: -1.0 + 0.0 * t, beta_dot=lambda t: 1.0 + 0.0 * t,
                   gamma_dot=gamma_dot)

    @classmethod
    def linear(cls) -> "InterpolantSchedule":
        zero = lambda t: 0.0 * t  # noqa: E731
        return cls(alpha=lambda t: 1.0 - t, beta=lambda t: t, gamma=zero,
                   alpha_dot=lambda t: -1.0 + 0.0 * t, beta_dot=lambda t: 1.0 + 0.0 * t,
                   gamma_dot=zero)

    def check(self, atol: float = 1e-12) -> None:
        ends = [self.alpha(1.0), self.beta(0.0), self.gamma(0.0), self.gamma(1.0)]
        if max(abs(float(v)) for v in ends) > atol:
            raise ValueError("schedule must vanish at alpha(1), beta(0), gamma(0), gamma(1)")
        if abs(float(self.alpha(0.0)) - 1) > atol or abs(float(self.beta(1.0)) - 1) > atol:
            raise ValueError("schedule must satisfy alpha(0) = beta(1) = 1")


@dataclass(frozen=True)
class PrecondCoeffs:
    c_in_sq: float
    c_skip: float
    c_out_sq: float


def _rowwise_t(t, n):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    if t.shape[0] != n:
        raise ValueError("t must be a scalar or have one entry per row")
    return t.reshape(n, 1)


def interp(x0, x1, z, t, eps: float) -> np.ndarray:
    """Brownian-bridge interpolant ``(1-t)x0 + t x1 + sqrt(eps t(1-t)) z`` row by row."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x0, x1, z = (np.asarray(a, dtype=np.float64) for a in (x0, x1, z))
    if not (x0.shape == x1.shape == z.shape):
        raise ValueError("x0, x1 and z must share a shape")
    tt = _rowwise_t(t, x0.shape[0])
    if np.any(tt < 0) or np.any(tt > 1):
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - tt) * x0 + tt * x1 + np.sqrt(eps * tt * (1.0 - tt)) * z


def interp_general(x0, x1, z, t, schedule: InterpolantSchedule) -> np.ndarray:
    x0, x1, z = (np.asarray(a, dtype=np.float64) for a in (x0, x1, z))
    tt = _rowwise_t(t, x0.shape[0])
    return schedule.alpha(tt) * x0 + schedule.beta(tt) * x1 + schedule.gamma(tt) * z


def optimal_eps_star(schedule: InterpolantSchedule, t: float) -> float:
    """Diffusivity minimising the path KL to the approximate flow at time ``t``.

    ``eps*^2 = 2 gamma gamma' - 2 gamma^2 alpha'/alpha``.
    """
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie in (0, 1)")
    a = float(schedule.alpha(t))
    if a == 0.0:
        raise ValueError("alpha vanishes at t")
    g = float(schedule.gamma(t))
    radicand = 2.0 * g * float(schedule.gamma_dot(t)) - 2.0 * g * g * float(schedule.alpha_dot(t)) / a
    if radicand < 0.0:
        # tiny negative values are rounding noise around a zero diffusivity
        if radicand > -1e-14:
            return 0.0
        raise ValueError("schedule admits no valid diffusivity at t")
    return float(np.sqrt(radicand))


def targets(x0, x1, x_t, t, direction: int) -> np.ndarray:
    """Bridge velocity targets: ``(x1 - x_t)/(1-t)`` forward, ``(x0 - x_t)/t`` backward."""
    x_t = np.asarray(x_t, dtype=np.float64)
    tt = _rowwise_t(t, x_t.shape[0])
    if direction == FORWARD:
        if np.any(tt >= 1.0):
            raise ValueError("forward target needs t < 1")
        return (np.asarray(x1, dtype=np.float64) - x_t) / (1.0 - tt)
    if direction == BACKWARD:
        if np.any(tt <= 0.0):
            raise ValueError("backward target needs t > 0")
        return (np.asarray(x0, dtype=np.float64) - x_t) / tt
    raise ValueError(f"direction must be {FORWARD} (fwd) or {BACKWARD} (bwd)")


def sample_times(rng: RngState, n: int, t_min: float = T_MIN) -> np.ndarray:
    return rng.uniform(t_min, 1.0 - t_min, n)


@dataclass(frozen=True)
class LossBatch:
    """Stacked regression problem for one bidirectional step.

    The first ``n_fwd`` rows carry the forward loss, the rest the backward
    loss. The backward rows are expressed in network time ``1 - t``.
    """

    s: np.ndarray
    t_net: np.ndarray
    x_t: np.ndarray
    target: np.ndarray
    n_fwd: int


def build_loss_batch(coupling_fwd: CouplingBatch | None, coupling_bwd: CouplingBatch | None,
                     rng: RngState, eps: float, t_min: float = T_MIN) -> LossBatch:
    """Draw t and Z per row and assemble both halves of the bridge-matching loss.

    The forward half regresses onto ``X1`` of ``coupling_fwd`` and the backward
    half onto ``X0`` of ``coupling_bwd``; the other endpoints only enter
    through the interpolant. Either half may be ``None``.
    """
    if coupling_fwd is None and coupling_bwd is None:
        raise ValueError("need at least one coupling")
    nf = coupling_fwd.n if coupling_fwd is not None else 0
    nb = coupling_bwd.n if coupling_bwd is not None else 0
    d = (coupling_fwd or coupling_bwd).d
    t = sample_times(rng, nf + nb, t_min)
    z = rng.normal((nf + nb, d))
    tf, tb = t[:nf], t[nf:]
    parts_x, parts_tau = [], []
    if nf:
        xt_f = interp(coupling_fwd.x0, coupling_fwd.x1, z[:nf], tf, eps)
        parts_x.append(xt_f)
        parts_tau.append(targets(None, coupling_fwd.x1, xt_f, tf, FORWARD))
    if nb:
        xt_b = interp(coupling_bwd.x0, coupling_bwd.x1, z[nf:], tb, eps)
        parts_x.append(xt_b)
        parts_tau.append(targets(coupling_bwd.x0, None, xt_b, tb, BACKWARD))
    s = np.concatenate([np.full(nf, float(FORWARD)), np.full(nb, float(BACKWARD))])
    return LossBatch(s=s, t_net=np.concatenate([tf, 1.0 - tb]),
                     x_t=np.concatenate(parts_x), target=np.concatenate(parts_tau), n_fwd=nf)


def split_losses(params: VectorFieldParams, lb: LossBatch) -> tuple[float, float]:
    v = net.forward(params, lb.s, lb.t_net, lb.x_t)
    r = np.einsum("ij,ij->i", v - lb.target, v - lb.target)
    return float(r[:lb.n_fwd].mean()), float(r[lb.n_fwd:].mean())


def bidirectional_empirical_loss(params: VectorFieldParams, coupling_fwd: CouplingBatch,
                                 coupling_bwd: CouplingBatch, rng: RngState, eps: float,
                                 t_min: float = T_MIN):
    """``0.5 (l_fwd + l_bwd)`` for a single bidirectional network, with its gradient.

    Half-batches must have equal size, in which case the mean over all stacked
    rows equals the average of the two per-direction means.
    """
    if coupling_fwd.n != coupling_bwd.n:
        raise ValueError("forward and backward half-batches must have equal size")
    if not params.spec.bidirectional:
        raise ValueError("bidirectional loss needs a bidirectional network")
    lb = build_loss_batch(coupling_fwd, coupling_bwd, rng, eps, t_min)
    return net.loss_and_grad(params, lb.s, lb.t_net, lb.x_t, lb.target)


def precond_coeffs(t: float, eps: float) -> PrecondCoeffs:
    """Input, skip and output scalings for the bridge target at time ``t``.

    With ``V = 1 + (eps-2) t (1-t)`` the per-coordinate second moment of
    ``X_t`` for independent unit-variance endpoints, ``c_in^2 = 1/V`` and
    ``c_skip``, ``c_out`` make the residual network target unit-variance.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    var = 1.0 + (eps - 2.0) * t * (1.0 - t)
    if var <= 0.0:
        raise ValueError("precondition denominator is not positive")
    c_out_sq = (1.0 + (eps - 1.0) * t) / ((1.0 - t) * var)
    if c_out_sq <= 0.0:
        raise ValueError("precondition denominator is not positive")
    return PrecondCoeffs(c_in_sq=1.0 / var, c_skip=((2.0 - eps) * t - 1.0) / var,
                         c_out_sq=c_out_sq)


def loss_weight(t: float, eps: float, scheme: str = "unit") -> float:
    """Per-time loss weight; ``unit`` is the default, ``inverse_c_out`` the alternative."""
    if scheme == "unit":
        return 1.0
    if scheme == "inverse_c_out":
        return 1.0 / precond_coeffs(t, eps).c_out_sq
    raise ValueError(f"unknown weighting scheme {scheme!r}")
