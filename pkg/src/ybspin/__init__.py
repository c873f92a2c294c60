"""Spin-Hamiltonian, spectroscopy and fitting toolkit for 171Yb:YVO4 hyperfine structure."""

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .spinham import AxialTensor, FieldVector, LevelSet, ManifoldParams, build_hamiltonian, eigensolve, manifold_levels

__all__ = [
    "DEFAULT_CONSTANTS",
    "PhysicalConstants",
    "AxialTensor",
    "FieldVector",
    "LevelSet",
    "ManifoldParams",
    "build_hamiltonian",
    "eigensolve",
    "manifold_levels",
]

__version__ = "0.1.0"
