"""Direction- and time-conditioned MLP vector field with hand-written backprop.

The network computes ``v(s, t, x)``: sinusoidal features of ``t`` (and of the
direction ``s`` for the bidirectional variant) each pass through their own
two-layer SiLU MLP; the embeddings are concatenated with ``x`` and fed to a
SiLU trunk. All parameters live in one flat float64 vector so that Adam, EMA
and clipping are plain vector operations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

from .numerics import RngState

T_MIN = 1e-4
FORWARD, BACKWARD = 1, 0
CHECKPOINT_VERSION = 1


class TimeDomainError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, row: int, message: str = "non-finite loss"):
        super().__init__(f"{message} (row {row})")
        self.row = row


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_units: int = 64
    depth: int = 2
    time_embed_dim: int = 16
    embed_hidden: int = 64
    bidirectional: bool = True
    embed_out: int | None = None  # defaults to input_dim
    max_frequency: float = 1e4
    precondition: bool = False
    precond_eps: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_units < 1 or self.depth < 1:
            raise ValueError("input_dim, hidden_units and depth must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def embed_dim(self) -> int:
        return self.embed_out or self.input_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


@lru_cache(maxsize=None)
def param_layout(spec: NetSpec) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    """``(name, shape, offset)`` for every array, in declaration order."""
    shapes = []
    emb = spec.embed_dim
    prefixes = ["temb", "semb"] if spec.bidirectional else ["temb"]
    for p in prefixes:
        shapes += [(f"{p}.w1", (spec.time_embed_dim, spec.embed_hidden)),
                   (f"{p}.b1", (spec.embed_hidden,)),
                   (f"{p}.w2", (spec.embed_hidden, emb)),
                   (f"{p}.b2", (emb,))]
    fan_in = spec.input_dim + emb * len(prefixes)
    for i in range(spec.depth):
        shapes += [(f"trunk{i}.w", (fan_in, spec.hidden_units)),
                   (f"trunk{i}.b", (spec.hidden_units,))]
        fan_in = spec.hidden_units
    shapes += [("out.w", (fan_in, spec.input_dim)), ("out.b", (spec.input_dim,))]
    layout, offset = [], 0
    for name, shape in shapes:
        layout.append((name, shape, offset))
        offset += int(np.prod(shape))
    return tuple(layout)


def n_params(spec: NetSpec) -> int:
    name, shape, offset = param_layout(spec)[-1]
    return offset + int(np.prod(shape))


@lru_cache(maxsize=None)
def _slices(spec: NetSpec):
    return tuple((name, slice(off, off + int(np.prod(shape))), shape)
                 for name, shape, off in param_layout(spec))


def unflatten(spec: NetSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into ``flat`` (writes through)."""
    return {name: flat[sl].reshape(shape) for name, sl, shape in _slices(spec)}


@dataclass(frozen=True)
class VectorFieldParams:
    spec: NetSpec
    flat: np.ndarray

    def __post_init__(self):
        if self.flat.shape != (n_params(self.spec),):
            raise ValueError(
                f"expected {n_params(self.spec)} parameters, got shape {self.flat.shape}")

    @cached_property
    def _views(self) -> dict[str, np.ndarray]:
        return unflatten(self.spec, self.flat)

    def views(self) -> dict[str, np.ndarray]:
        return self._views

    def replace(self, flat: np.ndarray) -> "VectorFieldParams":
        return VectorFieldParams(self.spec, flat)


def init_vector_field(spec: NetSpec, rng: RngState) -> VectorFieldParams:
    """LeCun-uniform weights (variance 1/fan_in), zero biases."""
    flat = np.zeros(n_params(spec))
    views = unflatten(spec, flat)
    for name, shape, _ in param_layout(spec):
        if name.endswith("b") or name.endswith("b1") or name.endswith("b2"):
            continue
        limit = np.sqrt(3.0 / shape[0])
        views[name][...] = rng.uniform(-limit, limit, shape)
    return VectorFieldParams(spec, flat)


def _sigmoid(h):
    # exp overflow for very negative h gives 1/inf = 0, which is the limit
    with np.errstate(over="ignore"):
        e = np.exp(-h)
    e += 1.0
    return np.reciprocal(e, out=e)


def _silu(h):
    return h * _sigmoid(h)


def _silu_grad(h):
    s = _sigmoid(h)
    return s * (1.0 + h * (1.0 - s))


@lru_cache(maxsize=None)
def _frequencies(half: int, max_frequency: float) -> np.ndarray:
    return np.geomspace(1.0, max_frequency, half)


def sinusoidal_features(u: np.ndarray, dim: int, max_frequency: float = 1e4) -> np.ndarray:
    freqs = _frequencies(dim // 2, max_frequency)
    arg = np.asarray(u, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def precond_coefficients(u, eps: float):
    """Input, skip and output scalings at network time ``u``.

    Mirrors :func:`sbflow.bridge.precond_coeffs`, vectorised; kept here to
    avoid a circular import.
    """
    u = np.asarray(u, dtype=np.float64)
    var = 1.0 + (eps - 2.0) * u * (1.0 - u)
    c_in = 1.0 / np.sqrt(var)
    c_skip = ((2.0 - eps) * u - 1.0) / var
    c_out = np.sqrt((1.0 + (eps - 1.0) * u) / ((1.0 - u) * var))
    return c_in, c_skip, c_out


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        if not 0.0 <= t < 1.0:
            raise TimeDomainError("time out of domain: t must lie in [0, 1)")
        return t
    if not (t.min() >= 0.0 and t.max() < 1.0):
        raise TimeDomainError("time out of domain: t must lie in [0, 1)")
    return t


def _embed(w, prefix, u, spec):
    feats = sinusoidal_features(u, spec.time_embed_dim, spec.max_frequency)
    h1 = feats @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"]
    a1 = _silu(h1)
    e = a1 @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]
    return e, (feats, h1, a1)


def _forward(params: VectorFieldParams, s, t, x, keep: bool):
    spec = params.spec
    w = params.views()
    n, d = x.shape
    if d != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {d}")
    t = _check_time(t)
    s = np.asarray(s, dtype=np.float64)
    scalar_t = t.ndim == 0
    if not scalar_t and t.shape[0] != n:
        raise ValueError("per-row times must have one entry per row")

    if spec.precondition:
        c_in, c_skip, c_out = precond_coefficients(t, spec.precond_eps)
        if not scalar_t:
            c_in, c_skip, c_out = c_in[:, None], c_skip[:, None], c_out[:, None]
        xin = c_in * x
    else:
        xin = x

    w0 = w["trunk0.w"]
    emb = spec.embed_dim
    e_t, cache_t = _embed(w, "temb", t, spec)
    h = xin @ w0[:d] + e_t @ w0[d:d + emb] + w["trunk0.b"]
    cache_s = None
    if spec.bidirectional:
        e_s, cache_s = _embed(w, "semb", s, spec)
        h = h + e_s @ w0[d + emb:]
    hs, acts = [h], []
    a = _silu(h)
    acts.append(a)
    for i in range(1, spec.depth):
        h = a @ w[f"trunk{i}.w"] + w[f"trunk{i}.b"]
        a = _silu(h)
        hs.append(h)
        acts.append(a)
    out = a @ w["out.w"] + w["out.b"]
    if spec.precondition:
        out = c_out * out + c_skip * x
    if not keep:
        return out, None
    cache = dict(xin=xin, hs=hs, acts=acts, cache_t=cache_t, cache_s=cache_s,
                 scalar_t=scalar_t, scalar_s=s.ndim == 0,
                 c_out=c_out if spec.precondition else None)
    return out, cache


def forward(params: VectorFieldParams, direction, t, x) -> np.ndarray:
    """Velocities ``v(direction, t, x)`` for every row of ``x``.

    ``direction`` and ``t`` are scalars or per-row arrays; ``t`` must be in
    ``[0, 1)``. For a one-directional network ``direction`` is ignored.
    """
    x = np.asarray(x, dtype=np.float64)
    out, _ = _forward(params, direction, t, x, keep=False)
    return out


def _embed_backward(w, g, prefix, cache, grads, reduce_rows):
    feats, h1, a1 = cache
    if reduce_rows:
        g = g.sum(axis=0, keepdims=True)
    grads[f"{prefix}.w2"] += a1.T @ g
    grads[f"{prefix}.b2"] += g.sum(axis=0)
    g_h1 = (g @ w[f"{prefix}.w2"].T) * _silu_grad(h1)
    grads[f"{prefix}.w1"] += feats.T @ g_h1
    grads[f"{prefix}.b1"] += g_h1.sum(axis=0)


def _backward(params: VectorFieldParams, cache, g_out) -> np.ndarray:
    """Parameter gradient given ``dL/dv`` (n x d)."""
    spec = params.spec
    w = params.views()
    flat = np.zeros_like(params.flat)
    grads = unflatten(spec, flat)
    if cache["c_out"] is not None:
        g_out = g_out * cache["c_out"]
    acts, hs = cache["acts"], cache["hs"]
    grads["out.w"] += acts[-1].T @ g_out
    grads["out.b"] += g_out.sum(axis=0)
    g_a = g_out @ w["out.w"].T
    for i in range(spec.depth - 1, -1, -1):
        g_h = g_a * _silu_grad(hs[i])
        a_prev = acts[i - 1] if i > 0 else None
        if i > 0:
            grads[f"trunk{i}.w"] += a_prev.T @ g_h
            grads[f"trunk{i}.b"] += g_h.sum(axis=0)
            g_a = g_h @ w[f"trunk{i}.w"].T
    # first trunk layer: inputs are [x, e_t, e_s]
    d, emb = spec.input_dim, spec.embed_dim
    w0 = w["trunk0.w"]
    g0 = grads["trunk0.w"]
    g0[:d] += cache["xin"].T @ g_h
    grads["trunk0.b"] += g_h.sum(axis=0)
    e_t = _embedding_value(w, "temb", cache["cache_t"])
    if cache["scalar_t"]:
        g0[d:d + emb] += np.outer(e_t[0], g_h.sum(axis=0))
    else:
        g0[d:d + emb] += e_t.T @ g_h
    _embed_backward(w, g_h @ w0[d:d + emb].T, "temb", cache["cache_t"], grads,
                    reduce_rows=cache["scalar_t"])
    if spec.bidirectional:
        e_s = _embedding_value(w, "semb", cache["cache_s"])
        if cache["scalar_s"]:
            g0[d + emb:] += np.outer(e_s[0], g_h.sum(axis=0))
        else:
            g0[d + emb:] += e_s.T @ g_h
        _embed_backward(w, g_h @ w0[d + emb:].T, "semb", cache["cache_s"], grads,
                        reduce_rows=cache["scalar_s"])
    return flat


def _embedding_value(w, prefix, cache):
    _, _, a1 = cache
    return a1 @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def loss_and_grad(params: VectorFieldParams, direction, t, x_t, target,
                  return_rows: bool = False):
    """Mean over rows of ``||v(direction, t, x_t) - target||^2`` and its exact gradient.

    With ``return_rows`` the per-row squared residuals are returned as a third value.

    Raises:
        NonFiniteLoss: if any row's residual is not finite; ``.row`` names it.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    out, cache = _forward(params, direction, t, x_t, keep=True)
    resid = out - target
    per_row = np.einsum("ij,ij->i", resid, resid)
    bad = np.flatnonzero(~np.isfinite(per_row))
    if bad.size:
        raise NonFiniteLoss(int(bad[0]))
    n = x_t.shape[0]
    loss = float(per_row.mean())
    grad = _backward(params, cache, (2.0 / n) * resid)
    if return_rows:
        return loss, grad, per_row
    return loss, grad


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "OptState":
        return cls(np.zeros(size), np.zeros(size))


@dataclass(frozen=True)
class TrainState:
    params: VectorFieldParams
    ema_params: VectorFieldParams
    opt: OptState
    step: int = 0
    ema_decay: float = 0.999

    @classmethod
    def create(cls, params: VectorFieldParams, ema_decay: float = 0.999) -> "TrainState":
        return cls(params, params.replace(params.flat.copy()),
                   OptState.zeros(params.flat.size), 0, ema_decay)

    def reset_optimizer(self) -> "TrainState":
        return dataclasses.replace(self, opt=OptState.zeros(self.params.flat.size))


def adam_step(state: TrainState, grads: np.ndarray, lr: float) -> TrainState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    o = state.opt
    step = o.step + 1
    m = o.beta1 * o.m + (1.0 - o.beta1) * grads
    v = o.beta2 * o.v + (1.0 - o.beta2) * grads * grads
    m_hat = m / (1.0 - o.beta1 ** step)
    v_hat = v / (1.0 - o.beta2 ** step)
    flat = state.params.flat - lr * m_hat / (np.sqrt(v_hat) + o.eps)
    return dataclasses.replace(
        state, params=state.params.replace(flat),
        opt=dataclasses.replace(o, m=m, v=v, step=step), step=state.step + 1)


def ema_update(state: TrainState) -> TrainState:
    g = state.ema_decay
    if not 0.0 <= g < 1.0:
        raise ValueError("ema_decay must lie in [0, 1)")
    ema = g * state.ema_params.flat + (1.0 - g) * state.params.flat
    return dataclasses.replace(state, ema_params=state.ema_params.replace(ema))


def global_norm(*grads: np.ndarray) -> float:
    """L2 norm of the concatenated vectors, scaled so that squares cannot overflow."""
    big = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if big == 0.0 or not np.isfinite(big):
        return big
    return big * float(np.sqrt(sum(float((g / big) @ (g / big)) for g in grads)))


def clip_grad_global_norm(grads, max_norm: float = 1.0):
    """Rescale a gradient vector (or a list of them) to global L2 norm <= ``max_norm``.

    Raises:
        FloatingPointError: if any gradient entry is not finite.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    single = isinstance(grads, np.ndarray)
    gs = [grads] if single else list(grads)
    norm = global_norm(*gs)
    if not np.isfinite(norm) or not all(np.all(np.isfinite(g)) for g in gs):
        raise FloatingPointError("non-finite gradient")
    if norm > max_norm:
        gs = [g * (max_norm / norm) for g in gs]
    return gs[0] if single else gs


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, states: dict[str, TrainState], meta: dict | None = None) -> None:
    """Write named train states (and free-form metadata) to an ``.npz`` file.

    Arrays are stored flat, in the declaration order of :func:`param_layout`.
    """
    header = {"format_version": CHECKPOINT_VERSION, "meta": meta or {},
              "nets": {name: {"spec": st.params.spec.to_dict(), "step": st.step,
                              "opt_step": st.opt.step, "ema_decay": st.ema_decay}
                       for name, st in states.items()}}
    arrays = {"format_version": np.array([CHECKPOINT_VERSION], dtype=np.uint8),
              "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, st in states.items():
        arrays[f"{name}.params"] = st.params.flat
        arrays[f"{name}.ema"] = st.ema_params.flat
        arrays[f"{name}.m"] = st.opt.m
        arrays[f"{name}.v"] = st.opt.v
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, TrainState], dict]:
    with np.load(Path(path)) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        header = json.loads(bytes(data["header"]).decode())
        states = {}
        for name, info in header["nets"].items():
            spec = NetSpec.from_dict(info["spec"])
            size = n_params(spec)
            arrs = {k: np.array(data[f"{name}.{k}"], dtype=np.float64)
                    for k in ("params", "ema", "m", "v")}
            for k, a in arrs.items():
                if a.shape != (size,):
                    raise ValueError(
                        f"checkpoint array {name}.{k} has shape {a.shape}, expected ({size},)")
            states[name] = TrainState(
                VectorFieldParams(spec, arrs["params"]), VectorFieldParams(spec, arrs["ema"]),
                OptState(arrs["m"], arrs["v"], info["opt_step"]), info["step"], info["ema_decay"])
    return states, header["meta"]
