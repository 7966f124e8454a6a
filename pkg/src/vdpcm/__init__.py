"""Finite-volume simulator for a thermodynamically consistent two-species corrosion model."""

from .discretization import FluxScheme, Mesh
from .energy import EnergyLedger
from .physics import ModelSpec, RawKinetics, Variant
from .stepper import SolverConfig, State, advance, equilibrium_state, initial_state, newton_solve

__all__ = [
    "EnergyLedger", "FluxScheme", "Mesh", "ModelSpec", "RawKinetics", "SolverConfig", "State",
    "Variant", "advance", "equilibrium_state", "initial_state", "newton_solve",
]

__version__ = "0.1.0"
