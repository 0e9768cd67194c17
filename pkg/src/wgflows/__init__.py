"""Learning potentials and interaction kernels of 1-D Wasserstein gradient
and Hamiltonian flows from density-trajectory data, with closed-form
structure-preserving kernel regression, forward simulators, and an
error/stability analysis harness."""

__version__ = "0.1.0"

from .kernels import SmoothKernel, gaussian_kernel, imq_kernel
from .mesh import DensityTrajectory, SpaceTimeMesh
from .rkhs import RkhsFunction, rkhs_inner, rkhs_norm, rkhs_norm_sq

__all__ = [
    "DensityTrajectory",
    "RkhsFunction",
    "SmoothKernel",
    "SpaceTimeMesh",
    "__version__",
    "gaussian_kernel",
    "imq_kernel",
    "rkhs_inner",
    "rkhs_norm",
    "rkhs_norm_sq",
]
