from typing import List, Optional, Tuple

import torch

from src.denoiser import ConditionalDenoiser
from src.errors import ScheduleDomainError
from src.samplers.base import Stepper
from src.schedules import NoiseSchedule


def implied_noise(z: torch.Tensor, z0_hat: torch.Tensor, t: float, schedule: NoiseSchedule) -> torch.Tensor:
    """
    Noise consistent with z and the z0 estimate: (z - alpha(t) z0_hat) / sigma(t).

    Raises:
        ScheduleDomainError: if sigma(t) = 0.
    """
    sigma = schedule.sigma(t)
    if sigma <= 0.0:
        raise ScheduleDomainError(f"cannot recover noise at sigma(t) = 0 (t = {t})")
    return (z - schedule.alpha(t) * z0_hat) / sigma


def ddim_step(
    z_prev: torch.Tensor,
    z0_hat: torch.Tensor,
    t_prev: float,
    t_next: float,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    Deterministic DDIM update.

        eps_hat = (z_prev - alpha(t_prev) z0_hat) / sigma(t_prev)
        z_next  = alpha(t_next) z0_hat + sigma(t_next) eps_hat

    Args:
        z_prev: Position at t_prev.
        z0_hat: Clean estimate.
        t_prev: Current timestep, sigma(t_prev) > 0.
        t_next: Next timestep.
        schedule: Noise schedule.

    Returns:
        Position at t_next.
    """
    if t_next == t_prev:
        return z_prev
    eps_hat = implied_noise(z_prev, z0_hat, t_prev, schedule)
    return schedule.alpha(t_next) * z0_hat + schedule.sigma(t_next) * eps_hat


class DDIMStepper(Stepper):
    """Baseline sampler: the model sees the trajectory timestep itself."""

    def model_grid(self) -> List[float]:
        return self.trajectory_grid()

    def step(
        self,
        model: ConditionalDenoiser,
        z_prev: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        i: int,
        self_cond: Optional[torch.Tensor],
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        grid = self.trajectory_grid()
        z0_hat = model.decode(z_prev, memory, source_mask, grid[i - 1], self_cond)
        return ddim_step(z_prev, z0_hat, grid[i - 1], grid[i], self.schedule), z0_hat
