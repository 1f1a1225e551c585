"""Integration with respect to Hilbert-valued Volterra processes on a Wiener-chaos grid.

Random quantities are exact finite Hermite-chaos expansions over the
Brownian increments of a time grid, so Malliavin derivatives, Skorohod
integrals and expectations are algebraic rather than sampled.
"""
from .chaos import (
    ChaosElement,
    MalliavinField,
    NoiseBasis,
    brownian,
    derivative,
    malliavin_derivative,
    multiply,
    skorohod,
)
from .kernels import (
    OperatorKernel,
    assemble_Kg,
    kernel_from_descriptor,
    make_exp_kernel,
    make_fbm_kernel,
    make_identity_kernel,
)
from .paths import Path
from .xintegral import VolterraSpec, simulate_X, x_integral

__version__ = "0.1.0"

__all__ = [
    "ChaosElement",
    "MalliavinField",
    "NoiseBasis",
    "OperatorKernel",
    "Path",
    "VolterraSpec",
    "assemble_Kg",
    "brownian",
    "derivative",
    "kernel_from_descriptor",
    "make_exp_kernel",
    "make_fbm_kernel",
    "make_identity_kernel",
    "malliavin_derivative",
    "multiply",
    "simulate_X",
    "skorohod",
    "x_integral",
    "__version__",
]
