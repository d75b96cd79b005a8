"""Cryptography-free simulator and cost model for packed CNN inference
under leveled CKKS."""

from .heslot import SET_HYP, SET_LC, Backend, CostLedger, HeParams
from .network import build_network, init_weights, run_inference

__version__ = "0.1.0"

__all__ = ["Backend", "CostLedger", "HeParams", "SET_HYP", "SET_LC",
           "build_network", "init_weights", "run_inference"]
