"""DWRSeg: a deterministic, CPU-only implementation of the dilation-wise
residual segmentation network -- engine, blocks, training recipe, and
receptive-field analyses -- with no deep-learning framework dependencies.
"""

from . import analysis, blocks, data, engine, network, training
from .params import ParamStore

__version__ = "0.1.0"

__all__ = ["analysis", "blocks", "data", "engine", "network", "training", "ParamStore"]
