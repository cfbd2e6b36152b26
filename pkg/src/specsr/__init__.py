"""Spectral super-resolution of multi-resolution multispectral cubes."""

from .cube import HyperCube, MultiResCube, SrtMatrix, read_envi, read_multires, write_envi, write_multires
from .errors import SpecSRError

__all__ = [
    "HyperCube",
    "MultiResCube",
    "SrtMatrix",
    "SpecSRError",
    "read_envi",
    "read_multires",
    "write_envi",
    "write_multires",
]
__version__ = "0.1.0"
