"""Distributed nonblind image deblurring by Douglas-Rachford consensus over overlapping blocks."""

__version__ = "0.1.0"

from .imaging import Region, chop, read_raw, write_raw  # noqa: E402
from .psf import Psf, PsfGrid, airy_psf, gaussian_psf, delta_psf  # noqa: E402
from .partition import build_layout, build_weights  # noqa: E402
from .operators import LocalBlurOperator, ShiftVariantOperator  # noqa: E402
from .objective import LocalObjective, global_objective  # noqa: E402
from .solver import SolverConfig, minimize, prox_local  # noqa: E402
from .consensus import DrConfig, ObjectiveParams, run_distributed, run_reference_singleprocess  # noqa: E402
from .metrics import snr, ssim  # noqa: E402

__all__ = [
    "Region", "chop", "read_raw", "write_raw",
    "Psf", "PsfGrid", "airy_psf", "gaussian_psf", "delta_psf",
    "build_layout", "build_weights",
    "LocalBlurOperator", "ShiftVariantOperator",
    "LocalObjective", "global_objective",
    "SolverConfig", "minimize", "prox_local",
    "DrConfig", "ObjectiveParams", "run_distributed", "run_reference_singleprocess",
    "snr", "ssim",
]
