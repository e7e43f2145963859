"""Non-stationary MIMO channel emulator.

GBSM channel generation (:mod:`chemu.gbsm`), chirp-subspace compression
(:mod:`chemu.subspace`), frequency-domain block convolution
(:mod:`chemu.engine`), validation metrics (:mod:`chemu.metrics`) and file
formats (:mod:`chemu.iofmt`).
"""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .errors import (BadMagic, ChemuError, ConfigError, FormatError, GeometryError, NearDependentBasis,
                     TruncatedPayload)
from .gbsm import AntennaArray, CtfGrid, ScenarioConfig, generate_ctf_grid, synthesize_ctf
from .subspace import ProjectionPackage, project_grid, reconstruct_grid
from .engine import EngineConfig, run_stream

__all__ = [
    "AntennaArray", "BACKEND", "BadMagic", "ChemuError", "ConfigError", "CtfGrid", "EngineConfig", "FormatError",
    "GeometryError", "NearDependentBasis", "ProjectionPackage", "ScenarioConfig", "TruncatedPayload",
    "generate_ctf_grid", "project_grid", "reconstruct_grid", "run_stream", "synthesize_ctf",
]
