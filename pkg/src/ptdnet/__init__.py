"""Learned topological denoising for graph convolutional networks.

Per-layer edge scorers produce hard-concrete gates on the adjacency of a GCN;
an expected-L0 penalty and a Ky Fan (truncated nuclear norm) penalty keep
the gated graph sparse and low rank.
"""

from .concrete import HCConfig
from .errors import (ConfigError, ContractError, DimensionError, DomainError, NumericalError,
                     ParseError, PTDNetError, RangeError)
from .graph import Graph, SynthConfig, synthesize
from .lowrank import SpectralConfig
from .trainer import TrainConfig, evaluate, run_training

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "DomainError", "Graph", "HCConfig",
    "NumericalError", "ParseError", "PTDNetError", "RangeError", "SpectralConfig",
    "SynthConfig", "TrainConfig", "evaluate", "run_training", "synthesize",
]

__version__ = "0.1.0"
