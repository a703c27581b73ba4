from abc import ABC, abstractmethod
from typing import List, Optional, Tuple

import torch

from src.denoiser import ConditionalDenoiser
from src.schedules import NoiseSchedule


def uniform_grid(start: float, stop: float, steps: int) -> List[float]:
    """M + 1 points from ``start`` down to ``stop``, endpoints inclusive."""
    return torch.linspace(start, stop, steps + 1, dtype=torch.float64).tolist()


class Stepper(ABC):
    """
    Abstract base class for deterministic samplers.

    A stepper walks the trajectory grid t_0 = 1 > ... > t_M = T and, at each
    step, queries the denoiser at a model-facing timestep. Subclasses decide
    which grid the model sees.

    Attributes:
        schedule (NoiseSchedule): Noise schedule.
        steps (int): Number of steps M.
        t_terminal (float): Last trajectory timestep T.
    """

    def __init__(self, schedule: NoiseSchedule, steps: int, t_terminal: float = 0.0):
        """
        Args:
            schedule: Noise schedule.
            steps: M >= 1.
            t_terminal: T in [0, 1).
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if not 0.0 <= t_terminal < 1.0:
            raise ValueError(f"t_terminal must lie in [0, 1), got {t_terminal}")
        self.schedule = schedule
        self.steps = steps
        self.t_terminal = t_terminal

    def trajectory_grid(self) -> List[float]:
        return uniform_grid(1.0, self.t_terminal, self.steps)

    @abstractmethod
    def model_grid(self) -> List[float]:
        """
        Timesteps fed to the denoiser, one per trajectory point.

        Returns:
            List[float]: M + 1 values; entry i is used at step i + 1.
        """
        pass

    @abstractmethod
    def step(
        self,
        model: ConditionalDenoiser,
        z_prev: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        i: int,
        self_cond: Optional[torch.Tensor],
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Advance from trajectory point i - 1 to point i.

        Returns:
            (z_next, z0_hat)
        """
        pass

    @torch.no_grad()
    def run(
        self,
        model: ConditionalDenoiser,
        z: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        trace: Optional[List[torch.Tensor]] = None,
    ) -> torch.Tensor:
        """
        Integrate from pure noise to the terminal point.

        The previous z0 estimate is fed back as self-conditioning (zeros at step 1).

        Args:
            model: Denoiser.
            z: (B, n, D) initial draw.
            memory: (B, m, H) encoded source.
            source_mask: (B, m) real source tokens.
            trace: If given, receives the z0 estimate of every step.

        Returns:
            (B, n, D) final position z_{t_M}.
        """
        self_cond = None
        for i in range(1, self.steps + 1):
            z, z0_hat = self.step(model, z, memory, source_mask, i, self_cond)
            self_cond = z0_hat
            if trace is not None:
                trace.append(z0_hat)
        return z

    @property
    def nfe_per_sample(self) -> int:
        return self.steps
