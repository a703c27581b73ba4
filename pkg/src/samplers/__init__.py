"""
Deterministic samplers.

Each sampler implements the Stepper interface: it owns the trajectory grid
and decides which timestep the denoiser is shown at every step.
"""

from src.samplers.base import Stepper
from src.samplers.ddim import DDIMStepper, ddim_step, implied_noise
from src.samplers.cedi import CeDiStepper, cedi_step

__all__ = [
    "Stepper",
    "DDIMStepper",
    "CeDiStepper",
    "ddim_step",
    "cedi_step",
    "implied_noise",
]
