"""Deterministic random numbers, quadrature and exact linear assignment.

Random draws come from a counter-based generator (Philox) keyed on
``(seed, stream_id)``. A draw is a pure function of ``(seed, stream_id,
counter)``; the counter is advanced by the number of Philox blocks consumed,
so replaying a run only requires the three integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.optimize import linear_sum_assignment

_MASK64 = (1 << 64) - 1


class IntegrandNotFinite(ValueError):
    pass


@dataclass
class RngState:
    """Counter-based random stream.

    Two states with equal ``(seed, stream_id, counter)`` produce identical
    draws. Every draw advances ``counter`` in place.
    """

    seed: int = 0
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> tuple[np.random.Generator, np.random.Philox]:
        bg = np.random.Philox(key=[self.seed & _MASK64, self.stream_id & _MASK64],
                              counter=self.counter)
        return np.random.Generator(bg), bg

    def _advance(self, bg: np.random.Philox) -> None:
        words = bg.state["state"]["counter"]
        value = 0
        for i, w in enumerate(words):
            value |= int(w) << (64 * i)
        # Partially consumed blocks are discarded so the next draw starts
        # on a fresh block boundary.
        self.counter = value

    def normal(self, size) -> np.ndarray:
        gen, bg = self._generator()
        out = gen.standard_normal(size)
        self._advance(bg)
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        gen, bg = self._generator()
        out = gen.uniform(low, high, size)
        self._advance(bg)
        return out

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        gen, bg = self._generator()
        out = gen.choice(n, size=k, replace=False)
        self._advance(bg)
        return out

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        gen, bg = self._generator()
        out = gen.integers(low, high, size)
        self._advance(bg)
        return out

    def spawn(self, stream_id: int) -> "RngState":
        """Fresh stream with the same seed and counter zero."""
        return RngState(self.seed, stream_id, 0)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.stream_id, self.counter)


@dataclass(frozen=True)
class CouplingBatch:
    """Paired endpoint samples; row ``i`` of ``x0`` goes with row ``i`` of ``x1``."""

    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape:
            raise ValueError(
                f"coupling shapes must be equal n x d, got {self.x0.shape} and {self.x1.shape}")

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def d(self) -> int:
        return self.x0.shape[1]

    def take(self, rows) -> "CouplingBatch":
        return CouplingBatch(self.x0[rows], self.x1[rows])


def as_batch(x) -> np.ndarray:
    """Validate and return ``x`` as a finite float64 ``n x d`` array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"batch must be n x d with n, d >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite entries")
    return x


def sample_std_normal(rng: RngState, n: int, d: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return rng.normal((n, d))


def quadrature(f: Callable, a: float, b: float, n_panels: int = 512) -> float:
    """Composite Simpson rule with ``n_panels`` (even) sub-intervals.

    ``f`` is called once on the full node array, so it should be vectorised.
    """
    if n_panels < 2 or n_panels % 2:
        raise ValueError("n_panels must be even and >= 2")
    x = np.linspace(a, b, n_panels + 1)
    y = np.broadcast_to(np.asarray(f(x), dtype=np.float64), x.shape)
    if not np.all(np.isfinite(y)):
        raise IntegrandNotFinite("integrand not finite")
    return float(integrate.simpson(y, x=x))


def cumulative_quadrature(f: Callable, a: float, b: float, n_panels: int = 512):
    """Running Simpson integrals of ``f`` from ``a`` to each of ``n_panels + 1`` nodes.

    Evaluates ``f`` on a grid twice as fine, so every returned value is an
    exact composite-Simpson sum (no trapezoid correction at odd nodes).

    Returns:
        (nodes, integrals) with ``integrals[0] == 0``.
    """
    if n_panels < 1:
        raise ValueError("n_panels must be >= 1")
    fine = np.linspace(a, b, 2 * n_panels + 1)
    y = np.asarray(f(fine), dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise IntegrandNotFinite("integrand not finite")
    h = (b - a) / (2 * n_panels)
    pair = h / 3.0 * (y[:-2:2] + 4.0 * y[1:-1:2] + y[2::2])
    return fine[::2], np.concatenate([[0.0], np.cumsum(pair)])


def solve_assignment(cost) -> np.ndarray:
    """Exact minimum-cost perfect matching of a square cost matrix.

    Returns ``sigma`` with ``sigma[i]`` the column assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] > 4096:
        raise ValueError("assignment size capped at 4096")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(cost.shape[0], dtype=np.int64)
    sigma[rows] = cols
    return sigma
