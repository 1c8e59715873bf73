"""Synthetic datasets and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .numerics import CouplingBatch, RngState, as_batch, solve_assignment

NAMES = ("gaussian", "eight_gaussians", "moons", "scurve", "antithetic_gaussian")
W2_CAP = 1024

# Population moments of the noiseless generators, used for standardisation
# so that samples stay independent of the batch they are drawn in.
_MOONS_MEAN = np.array([0.5, 0.25])
_MOONS_VAR = np.array([0.75, 0.5625 - 1.0 / np.pi])
_SCURVE_MEAN = np.array([0.0, 0.0])
_SCURVE_VAR = np.array([0.5, 1.5 + 4.0 / (3.0 * np.pi)])


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    dim: int = 2
    sigma: float = 1.0
    noise: float = 0.05
    radius: float = 4.0 / math.sqrt(2.0)
    mode_sd: float = 0.5 / math.sqrt(2.0)

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; expected one of {NAMES}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.name in ("eight_gaussians", "moons", "scurve") and self.dim != 2:
            raise ValueError(f"{self.name} is two-dimensional")
        if self.sigma <= 0 or self.noise < 0 or self.radius <= 0 or self.mode_sd <= 0:
            raise ValueError("dataset scale parameters must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _moons(n, noise, rng):
    theta = rng.uniform(0.0, np.pi, n)
    upper = rng.integers(0, 2, n).astype(bool)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + noise * rng.normal((n, 2))
    return (pts - _MOONS_MEAN) / np.sqrt(_MOONS_VAR + noise**2)


def _scurve(n, noise, rng):
    t = 3.0 * np.pi * (rng.uniform(0.0, 1.0, n) - 0.5)
    pts = np.stack([np.sin(t), np.sign(t) * (np.cos(t) - 1.0)], axis=1)
    pts = pts + noise * rng.normal((n, 2))
    return (pts - _SCURVE_MEAN) / np.sqrt(_SCURVE_VAR + noise**2)


def ring_centers(radius: float) -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4.0)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _eight_gaussians(n, radius, mode_sd, rng):
    which = rng.integers(0, 8, n)
    return ring_centers(radius)[which] + mode_sd * rng.normal((n, 2))


def make_batch(spec: DatasetSpec, n: int, rng: RngState):
    """``n`` fresh samples; ``antithetic_gaussian`` gives a :class:`CouplingBatch` ``(X, -X)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.name == "gaussian":
        return spec.sigma * rng.normal((n, spec.dim))
    if spec.name == "antithetic_gaussian":
        x0 = spec.sigma * rng.normal((n, spec.dim))
        return CouplingBatch(x0, -x0)
    if spec.name == "moons":
        return _moons(n, spec.noise, rng)
    if spec.name == "scurve":
        return _scurve(n, spec.noise, rng)
    return _eight_gaussians(n, spec.radius, spec.mode_sd, rng)


def sampler_for(spec: DatasetSpec) -> Callable[[int, RngState], np.ndarray]:
    if spec.name == "antithetic_gaussian":
        return lambda n, rng: make_batch(spec, n, rng).x0
    return lambda n, rng: make_batch(spec, n, rng)


def _same_shape(a, b):
    a, b = as_batch(a), as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def empirical_cov(a, b) -> float:
    """Isotropic cross-moment ``(1/(n d)) sum a * b``."""
    a, b = _same_shape(a, b)
    return float(np.einsum("ij,ij->", a, b) / a.size)


def sq_dist_matrix(a, b) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def wasserstein2(a, b) -> float:
    """Exact W2 between equal-size empirical measures (uniform weights)."""
    a, b = _same_shape(a, b)
    n = a.shape[0]
    if n > W2_CAP:
        raise ValueError(f"point clouds capped at {W2_CAP} points for W2")
    cost = sq_dist_matrix(a, b)
    sigma = solve_assignment(cost)
    # recompute matched distances directly to avoid cancellation in the expansion
    return float(np.sqrt(((a - b[sigma]) ** 2).sum(1).mean()))


def w2_mean_sd(draw_a: Callable[[int, RngState], np.ndarray],
               draw_b: Callable[[int, RngState], np.ndarray],
               n: int, repeats: int, rng: RngState) -> tuple[float, float]:
    """Mean and sample sd of W2 over ``repeats`` independent redraws of both clouds."""
    vals = [wasserstein2(draw_a(n, rng), draw_b(n, rng)) for _ in range(repeats)]
    sd = float(np.std(vals, ddof=1)) if repeats > 1 else 0.0
    return float(np.mean(vals)), sd


def msd(a, b) -> float:
    """Mean over rows of ``||a_i - b_i||^2 / d``."""
    a, b = _same_shape(a, b)
    return float(((a - b) ** 2).sum(1).mean() / a.shape[1])
