"""Finite element simulation of the stochastic incompressible Navier-Stokes
equations on the periodic unit square.

Taylor-Hood P2/P1 elements in space, a Helmholtz-split implicit Euler scheme
in time, truncated Q-Wiener noise with multiplicative diffusion, and coupled
Monte Carlo convergence studies.
"""
__version__ = "0.1.0"

from .mesh import MeshTopology, build_periodic_uniform_mesh
from .noise import NoiseSpec, WienerPath, sqrt_diffusion
from .spaces import FieldCoefficients, SpaceKind, build_dof_map
from .stepper import SchemeConfig, advance, initial_state, run_path

__all__ = [
    "FieldCoefficients",
    "MeshTopology",
    "NoiseSpec",
    "SchemeConfig",
    "SpaceKind",
    "WienerPath",
    "advance",
    "build_dof_map",
    "build_periodic_uniform_mesh",
    "initial_state",
    "run_path",
    "sqrt_diffusion",
]
