"""
Condition-enhanced sampling.

The trajectory walks the usual grid t_0 = 1 > ... > t_M = T, but the denoiser
is always shown a timestep from a second grid tau_0 = 1 > ... > tau_M that
stays in the large-noise region. At a large indicated t the network cannot
lean on z_t and falls back on the source. The implied noise is taken against
tau so the step stays consistent with what the model was told.
"""

from typing import List, Optional, Tuple

import torch

from src.config import SamplerConfig
from src.denoiser import ConditionalDenoiser
from src.samplers.base import Stepper, uniform_grid
from src.samplers.ddim import ddim_step
from src.schedules import NoiseSchedule


def cedi_step(
    model: ConditionalDenoiser,
    z_prev: torch.Tensor,
    memory: torch.Tensor,
    source_mask: torch.Tensor,
    t_prev: float,
    t_next: float,
    tau_prev: float,
    schedule: NoiseSchedule,
    self_cond: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One condition-enhanced step.

    Args:
        model: Denoiser.
        z_prev: (B, n, D) position at trajectory point t_prev.
        memory: (B, m, H) encoded source.
        source_mask: (B, m) real source tokens.
        t_prev: Current trajectory timestep.
        t_next: Next trajectory timestep.
        tau_prev: Model-facing timestep, sigma(tau_prev) > 0.
        schedule: Noise schedule.
        self_cond: Previous z0 estimate.

    Returns:
        (z_next, z0_hat)
    """
    if t_next > t_prev:
        raise ValueError(f"trajectory must not move upwards: {t_prev} -> {t_next}")
    z0_hat = model.decode(z_prev, memory, source_mask, tau_prev, self_cond)
    return ddim_step(z_prev, z0_hat, tau_prev, t_next, schedule), z0_hat


class CeDiStepper(Stepper):
    """
    Condition-enhanced stepper.

    Attributes:
        tau_terminal (float): Last model-facing timestep tau_M. With
            tau_terminal == t_terminal the sampler reduces to DDIM.
    """

    def __init__(self, schedule: NoiseSchedule, steps: int, t_terminal: float = 0.0, tau_terminal: float = 0.99):
        super().__init__(schedule, steps, t_terminal)
        if not 0.0 <= tau_terminal < 1.0:
            raise ValueError(f"tau_terminal must lie in [0, 1), got {tau_terminal}")
        self.tau_terminal = tau_terminal

    @classmethod
    def from_config(cls, config: SamplerConfig, schedule: NoiseSchedule) -> "CeDiStepper":
        """tau_M = sigma_inverse(tau_sigma): 0.99 under linear, 0.9606 under sqrt for tau_sigma = 0.99."""
        return cls(schedule, config.steps, config.t_terminal, float(schedule.sigma_inverse(config.tau_sigma)))

    def model_grid(self) -> List[float]:
        return uniform_grid(1.0, self.tau_terminal, self.steps)

    def step(
        self,
        model: ConditionalDenoiser,
        z_prev: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        i: int,
        self_cond: Optional[torch.Tensor],
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        grid, taus = self.trajectory_grid(), self.model_grid()
        return cedi_step(
            model, z_prev, memory, source_mask, grid[i - 1], grid[i], taus[i - 1], self.schedule, self_cond,
        )
