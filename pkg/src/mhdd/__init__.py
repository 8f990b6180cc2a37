"""Simulated molecular hard-disk: device model, 6-bit level codec, in-memory logic,
storage arrays and in-situ XOR image encryption."""
from .device import ModelParams, UnitState
from .codec import LevelCodec
from .array import ArrayGeometry, MolecularArray
from .errors import MhddError

__all__ = ["ModelParams", "UnitState", "LevelCodec", "ArrayGeometry", "MolecularArray", "MhddError"]
__version__ = "0.1.0"
