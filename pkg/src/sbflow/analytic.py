"""Closed forms and numerical oracles.

* entropic OT between centred 1D Gaussians (closed form plus a Sinkhorn oracle);
* exact Gaussian iterative-Markovian-fitting recursions with an injected
  multiplicative drift error, for forward-only and forward/backward training;
* the two-set projection toy and its continuous-time flow;
* the drift-sum consistency residual against a known score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .net import BACKWARD, FORWARD
from .numerics import cumulative_quadrature
from .sampler import as_field

FORWARD_FORWARD = "forward_forward"
FORWARD_BACKWARD = "forward_backward"
MODES = (FORWARD_FORWARD, FORWARD_BACKWARD)

SQRT2_M1 = np.sqrt(2.0) - 1.0


class SinkhornDidNotConverge(RuntimeError):
    pass


class InadmissibleState(ValueError):
    pass


# --------------------------------------------------------------------------
# entropic OT between Gaussians


def gaussian_eot_cross_cov(sigma0: float, sigma1: float, eps: float) -> float:
    """Cross-covariance ``E[X0 X1]`` of the entropic OT plan between
    ``N(0, sigma0^2)`` and ``N(0, sigma1^2)`` for cost ``|x-y|^2/2`` and
    regularisation ``eps``: ``0.5 (sqrt(4 s0^2 s1^2 + eps^2) - eps)``.
    """
    if sigma0 <= 0 or sigma1 <= 0 or eps <= 0:
        raise ValueError("sigma0, sigma1 and eps must be positive")
    return 0.5 * (math.sqrt(4.0 * sigma0**2 * sigma1**2 + eps**2) - eps)


def sinkhorn_1d_oracle(sigma0: float, sigma1: float, eps: float,
                       grid_halfwidth: float = 6.0, m: int = 600,
                       tol: float = 1e-10, max_iter: int = 200_000) -> float:
    """``E[XY]`` under the discrete entropic plan between gridded Gaussians.

    Each marginal lives on ``m`` equispaced points spanning
    ``+-grid_halfwidth`` of its own standard deviations. Sinkhorn runs in the
    log domain on the kernel ``exp(-(x-y)^2 / (2 eps))``.
    """
    if m < 100:
        raise ValueError("m must be >= 100")
    if grid_halfwidth < 5:
        raise ValueError("grid must cover at least 5 standard deviations")
    x = np.linspace(-grid_halfwidth, grid_halfwidth, m) * sigma0
    y = np.linspace(-grid_halfwidth, grid_halfwidth, m) * sigma1
    log_a = -0.5 * (x / sigma0) ** 2
    log_a -= logsumexp(log_a)
    log_b = -0.5 * (y / sigma1) ** 2
    log_b -= logsumexp(log_b)
    neg_c = -0.5 * (x[:, None] - y[None, :]) ** 2 / eps
    f = np.zeros(m)
    g = np.zeros(m)
    for it in range(max_iter):
        f = log_a - logsumexp(neg_c + g[None, :], axis=1)
        g = log_b - logsumexp(neg_c + f[:, None], axis=0)
        if it % 10 == 0:
            log_p = neg_c + f[:, None] + g[None, :]
            # column marginals are exact after the g update
            err = np.abs(np.exp(logsumexp(log_p, axis=1)) - np.exp(log_a)).sum()
            if err < tol:
                return float(np.exp(log_p).T.dot(x).dot(y))
    raise SinkhornDidNotConverge(f"Sinkhorn did not converge within {max_iter} iterations")


# --------------------------------------------------------------------------
# Gaussian IMF recursions; the reference process is sqrt(2) B_t throughout


def gaussian_drift_coeff(t, c00, c11, c01):
    """Scalar ``a_t`` with ``(E[X1 | X_t = x] - x)/(1-t) = a_t x``."""
    num = -(1.0 - t) * c00 + t * c11 + (1.0 - 2.0 * t) * c01 - 2.0 * t
    den = (1.0 - t) ** 2 * c00 + t**2 * c11 + 2.0 * t * (1.0 - t) * c01 + 2.0 * t * (1.0 - t)
    if np.any(np.asarray(den) <= 0.0):
        raise InadmissibleState("covariance state left admissible region")
    return num / den


@dataclass(frozen=True)
class Coeffs:
    c00: float
    c11: float
    c01: float

    def check(self):
        if not (self.c00 > 0 and self.c11 > 0 and np.isfinite(self.c01)):
            raise InadmissibleState("covariance state left admissible region")


@dataclass(frozen=True)
class GaussianIterState:
    """Isotropic coupling coefficients.

    ``fwd`` is the coupling produced by the forward model (``c00`` pinned to
    the source variance); ``bwd`` exists only in forward_backward mode and is
    produced by the backward model (``c11`` pinned to the target variance).
    """

    fwd: Coeffs
    mode: str = FORWARD_FORWARD
    bwd: Coeffs | None = None
    n: int = 0

    @property
    def c00(self):
        return self.fwd.c00

    @property
    def c11(self):
        return self.fwd.c11

    @property
    def c01(self):
        return self.fwd.c01

    @classmethod
    def independent(cls, mode: str = FORWARD_FORWARD) -> "GaussianIterState":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        start = Coeffs(1.0, 1.0, 0.0)
        return cls(fwd=start, mode=mode, bwd=start if mode == FORWARD_BACKWARD else None)


def _projected_sde_moments(c00, c11, c01, eps_err, n_panels=512):
    """Terminal (cross-covariance, variance) of ``dX = (a_t + eps_err) X dt + sqrt(2) dB``
    started from ``N(0, 1)``, where ``a_t`` is the projection drift of the given coupling.

    ``F`` is tabulated on a ``2 n_panels`` grid (each value an exact composite
    Simpson sum) so that the outer integral of ``exp(-F)`` is resolved as
    finely as the inner one.
    """
    nodes, cum = cumulative_quadrature(
        lambda s: gaussian_drift_coeff(s, c00, c11, c01), 0.0, 1.0, 2 * n_panels)
    big_f = 2.0 * cum + 2.0 * eps_err * nodes
    with np.errstate(over="ignore"):
        tail = integrate.simpson(np.exp(-big_f), x=nodes)
        c01_new = np.exp(0.5 * big_f[-1])
        c11_new = np.exp(big_f[-1]) * (1.0 + 2.0 * tail)
    if not (np.isfinite(c01_new) and np.isfinite(c11_new)):
        raise InadmissibleState("covariance state left admissible region")
    return float(c01_new), float(c11_new)


def imf_gaussian_step(state: GaussianIterState, eps_err: float,
                      n_panels: int = 512) -> GaussianIterState:
    """One Markovian projection (with drift error ``eps_err * x``) plus re-coupling.

    forward_forward: the forward model is refit on its own previous coupling.
    forward_backward: the forward model is refit on the backward model's
    coupling and vice versa; the backward pass is the forward computation in
    reversed time, so it sees ``(c11, 1, c01)`` of the forward coupling.
    """
    state.fwd.check()
    if state.mode == FORWARD_FORWARD:
        c01, c11 = _projected_sde_moments(1.0, state.c11, state.c01, eps_err, n_panels)
        return replace(state, fwd=Coeffs(1.0, c11, c01), n=state.n + 1)
    if state.mode != FORWARD_BACKWARD or state.bwd is None:
        raise ValueError("forward_backward state needs a backward coupling")
    b, f = state.bwd, state.fwd
    b.check()
    c01_f, c11_f = _projected_sde_moments(b.c00, 1.0, b.c01, eps_err, n_panels)
    c01_b, c00_b = _projected_sde_moments(f.c11, 1.0, f.c01, eps_err, n_panels)
    return replace(state, fwd=Coeffs(1.0, c11_f, c01_f), bwd=Coeffs(c00_b, 1.0, c01_b),
                   n=state.n + 1)


def run_imf_gaussian(mode: str, eps_err: float, n_iters: int,
                     start: GaussianIterState | None = None,
                     n_panels: int = 512, stop_if_inadmissible: bool = False
                     ) -> list[GaussianIterState]:
    """States ``[s_0, s_1, ...]``, ``n_iters + 1`` of them unless the recursion
    leaves the admissible region and ``stop_if_inadmissible`` is set, in which
    case the list ends at the last admissible state.
    """
    state = start or GaussianIterState.independent(mode)
    out = [state]
    for _ in range(n_iters):
        try:
            state = imf_gaussian_step(state, eps_err, n_panels)
        except InadmissibleState:
            if stop_if_inadmissible:
                break
            raise
        out.append(state)
    return out


# --------------------------------------------------------------------------
# two-set projection toy: A1 = {y >= x}, A2 = {y <= 0}


@dataclass(frozen=True)
class ToyState:
    x: float
    y: float


def _check_toy_start(x0, y0):
    if not (0.0 < y0 < x0):
        raise ValueError("toy start must satisfy 0 < y0 < x0")


def proj_a2(x, y):
    return (x, 0.0) if y > 0 else (x, y)


def proj_a1(x, y):
    if y < x:
        m = 0.5 * (x + y)
        return (m, m)
    return (x, y)


def toy_iterate(x0: float, y0: float, alpha: float, n: int) -> list[ToyState]:
    """Relaxed alternating projections ``z <- (1-alpha) z + alpha P1(P2(z))``; returns all ``n+1`` iterates."""
    _check_toy_start(x0, y0)
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    x, y = x0, y0
    out = [ToyState(x, y)]
    for _ in range(n):
        px, py = proj_a1(*proj_a2(x, y))
        x, y = (1.0 - alpha) * x + alpha * px, (1.0 - alpha) * y + alpha * py
        out.append(ToyState(x, y))
    return out


def toy_flow(x0: float, y0: float, t) -> ToyState:
    """Closed-form solution of ``d(x,y)/dt = P1(P2(x,y)) - (x,y)`` from ``(x0, y0)``."""
    _check_toy_start(x0, y0)
    x = x0 * np.exp(-0.5 * np.asarray(t, dtype=np.float64))
    y = x + x**2 * (y0 - x0) / x0**2
    return ToyState(x, y)


def toy_vector_field(x, y):
    px, py = proj_a1(*proj_a2(x, y))
    return px - x, py - y


def toy_flow_rk4(x0: float, y0: float, t_end: float, n_steps: int) -> list[ToyState]:
    """Classical RK4 on the projection ODE; returns ``n_steps + 1`` states."""
    _check_toy_start(x0, y0)
    h = t_end / n_steps
    z = np.array([x0, y0])

    def rhs(v):
        return np.array(toy_vector_field(v[0], v[1]))

    out = [ToyState(*z)]
    for _ in range(n_steps):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * h * k1)
        k3 = rhs(z + 0.5 * h * k2)
        k4 = rhs(z + h * k3)
        z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(ToyState(*z))
    return out


def toy_y_sum(x0, y0, alpha, n) -> float:
    """y-component of the relaxed iteration, summed directly from its recursion."""
    k = np.arange(n)
    s = np.sum((1.0 - alpha) ** k * (1.0 - 0.5 * alpha) ** (n - 1 - k))
    return (1.0 - alpha) ** n * y0 + 0.5 * alpha * x0 * s


def toy_y_sum_published(x0, y0, alpha, n) -> float:
    """The geometric-sum form as published: ``alpha x0 sum (1-alpha)^k (1-alpha/2)^(n-k)``.

    It agrees with the iteration only at ``alpha = 1``.
    """
    k = np.arange(n)
    s = np.sum((1.0 - alpha) ** k * (1.0 - 0.5 * alpha) ** (n - k))
    return (1.0 - alpha) ** n * y0 + alpha * x0 * s


# --------------------------------------------------------------------------
# drift-sum consistency


def gaussian_marginal_var(t, sigma0, sigma1, c01, eps):
    return ((1 - t) ** 2 * sigma0**2 + t**2 * sigma1**2 + 2 * t * (1 - t) * c01
            + eps * t * (1 - t))


def gaussian_score(sigma0: float, sigma1: float, c01: float, eps: float) -> Callable:
    """Score of the bridge marginal of a centred isotropic Gaussian coupling."""
    return lambda t, x: -np.asarray(x) / gaussian_marginal_var(t, sigma0, sigma1, c01, eps)


def consistency_residual(field, t: float, x_probe, eps: float, score: Callable) -> float:
    """Mean ``||v(1, t, x) + v(0, 1-t, x) - eps * score(t, x)||^2`` over probes."""
    f = as_field(field)
    x = np.asarray(x_probe, dtype=np.float64)
    r = f(FORWARD, t, x) + f(BACKWARD, 1.0 - t, x) - eps * score(t, x)
    return float(np.einsum("ij,ij->i", r, r).mean())
