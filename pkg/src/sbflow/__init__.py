"""Desk-scale Schrodinger bridges: bridge matching, online finetuning and analytic checks."""

from .net import BACKWARD, FORWARD, NetSpec, TrainState
from .numerics import CouplingBatch, RngState
from .train import BridgeModel, TrainConfig

__version__ = "0.1.0"

__all__ = ["BACKWARD", "FORWARD", "BridgeModel", "CouplingBatch", "NetSpec", "RngState",
           "TrainConfig", "TrainState", "__version__"]
