"""Flat INI experiment configuration with a lossless round trip."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_metrics import DatasetSpec
from .net import NetSpec
from .train import TrainConfig

RUN_MODES = ("online", "iterative", "replay")
COUPLINGS = ("independent", "antithetic")


@dataclass(frozen=True)
class EvalConfig:
    eval_every: int = 500
    n_eval: int = 1000
    w2_repeats: int = 5
    sde_steps: int = 100
    pf_steps: int = 20
    energy_steps: int = 100
    consistency_t: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    label: str = "run"
    out_dir: str = "out"
    mode: str = "online"
    two_networks: bool = False
    coupling: str = "independent"
    swap_every: int = 2500
    capacity: int = 0  # replay buffer size; 0 means one half-batch
    n_refresh: int = 1

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {RUN_MODES}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig
    net: NetSpec
    source: DatasetSpec
    target: DatasetSpec
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.source.dim != self.target.dim or self.net.input_dim != self.source.dim:
            raise ValueError("source, target and network dimensions must agree")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))


_SECTIONS = {"train": TrainConfig, "net": NetSpec, "source": DatasetSpec,
             "target": DatasetSpec, "eval": EvalConfig, "run": RunConfig}


def _encode(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _decode(text: str, default, name: str):
    t = text.strip()
    if t.lower() == "none":
        return None
    if isinstance(default, bool):
        if t.lower() in ("true", "yes", "1", "on"):
            return True
        if t.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {t!r}")
    if isinstance(default, int) or (default is None and t.lstrip("-").isdigit()):
        return int(t)
    if isinstance(default, float):
        return float(t)
    return t


def _section_kwargs(parser, section: str, cls) -> dict:
    if not parser.has_section(section):
        return {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        out[key] = _decode(raw, default, f"{section}.{key}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    extra = set(parser.sections()) - set(_SECTIONS)
    if extra:
        raise ValueError(f"unknown config sections {sorted(extra)}")
    parts = {name: cls(**_section_kwargs(parser, name, cls)) for name, cls in _SECTIONS.items()
             if name not in ("net", "source", "target")}
    for name in ("source", "target"):
        kw = _section_kwargs(parser, name, DatasetSpec)
        if "name" not in kw:
            raise ValueError(f"section [{name}] needs a dataset name")
        parts[name] = DatasetSpec(**kw)
    net_kw = _section_kwargs(parser, "net", NetSpec)
    net_kw.setdefault("input_dim", parts["source"].dim)
    parts["net"] = NetSpec(**net_kw)
    return ExperimentConfig(**parts)


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
