"""Euler-Maruyama for the forward/backward SDEs, probability-flow ODE, path energy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import net
from .net import BACKWARD, FORWARD, T_MIN, VectorFieldParams
from .numerics import RngState

# field(direction, t, x) -> velocities
Field = Callable[[int, float, np.ndarray], np.ndarray]


class TrajectoryDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), n, d)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]


@dataclass(frozen=True)
class TwoNetField:
    """Separate forward and backward networks behind the bidirectional call signature."""

    fwd: VectorFieldParams
    bwd: VectorFieldParams

    def __call__(self, direction, t, x):
        p = self.fwd if direction == FORWARD else self.bwd
        return net.forward(p, direction, t, x)


def as_field(model: Union[VectorFieldParams, TwoNetField, Field]) -> Field:
    if isinstance(model, VectorFieldParams):
        return lambda s, t, x: net.forward(model, s, t, x)
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a vector field")


def _left_times(n_steps: int, t_min: float) -> np.ndarray:
    return np.minimum(np.arange(n_steps) / n_steps, 1.0 - t_min)


def euler_maruyama(field, x_init, n_steps: int, eps: float, rng: RngState,
                   direction: int = FORWARD, store: bool = True,
                   t_min: float = T_MIN) -> Trajectory:
    """Integrate ``dX = v(direction, t, X) dt + sqrt(eps) dB`` on ``[0, 1]``.

    For ``direction=BACKWARD`` the time axis is the backward network's own
    time, so ``x_init`` should come from the target marginal and the result
    approximates the source marginal. With ``store=False`` only the two
    endpoints are kept.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    f = as_field(field)
    x = np.array(x_init, dtype=np.float64, copy=True)
    h = 1.0 / n_steps
    times = _left_times(n_steps, t_min)
    noise = rng.normal((n_steps,) + x.shape) * np.sqrt(eps * h) if eps > 0 else None
    states = [x.copy()] if store else None
    x_start = x.copy()
    for k in range(n_steps):
        x = x + f(direction, times[k], x) * h
        if noise is not None:
            x += noise[k]
        if not np.all(np.isfinite(x)):
            raise TrajectoryDiverged(k)
        if store:
            states.append(x)
    grid = np.linspace(0.0, 1.0, n_steps + 1)
    if store:
        return Trajectory(grid, np.stack(states))
    return Trajectory(np.array([0.0, 1.0]), np.stack([x_start, x]))


def pf_drift(field, t: float, x, t_min: float = T_MIN) -> np.ndarray:
    """``0.5 [v(1, t, x) - v(0, 1 - t, x)]`` with both times kept below one."""
    f = as_field(field)
    t_f = min(t, 1.0 - t_min)
    t_b = min(1.0 - t, 1.0 - t_min)
    return 0.5 * (f(FORWARD, t_f, x) - f(BACKWARD, t_b, x))


def pf_ode(field, x_init, n_steps: int = 20, store: bool = True,
           t_min: float = T_MIN) -> Trajectory:
    """Explicit Euler on the probability-flow drift, deterministic."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    f = as_field(field)
    x = np.array(x_init, dtype=np.float64, copy=True)
    h = 1.0 / n_steps
    states = [x.copy()]
    x_start = x.copy()
    for k in range(n_steps):
        x = x + pf_drift(f, k * h, x, t_min) * h
        if not np.all(np.isfinite(x)):
            raise TrajectoryDiverged(k)
        if store:
            states.append(x)
    if store:
        return Trajectory(np.linspace(0.0, 1.0, n_steps + 1), np.stack(states))
    return Trajectory(np.array([0.0, 1.0]), np.stack([x_start, x]))


def path_energy(field, x0, n_steps: int = 100, drift: Callable | None = None,
                t_min: float = T_MIN) -> float:
    """Batch mean of ``sum_k ||drift(t_k, X_k)||^2 h`` along the Euler path.

    ``drift`` defaults to the probability-flow drift of ``field``; pass a
    plain ``(t, x) -> v`` callable to measure any other ODE.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if drift is None:
        f = as_field(field)
        drift = lambda t, x: pf_drift(f, t, x, t_min)  # noqa: E731
    x = np.array(x0, dtype=np.float64, copy=True)
    h = 1.0 / n_steps
    acc = np.zeros(x.shape[0])
    for k in range(n_steps):
        v = drift(k * h, x)
        acc += np.einsum("ij,ij->i", v, v) * h
        x = x + v * h
        if not np.all(np.isfinite(x)):
            raise TrajectoryDiverged(k)
    return float(acc.mean())
