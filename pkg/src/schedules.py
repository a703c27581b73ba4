"""
Noise schedules and the clipped training-time sampler.

A schedule is the pair sigma(t), alpha(t) = sqrt(1 - sigma(t)^2) on t in [0, 1]
with sigma(0) = 0 and sigma(1) = 1. Functions accept Python floats or tensors
and return the same kind.
"""

import math
from dataclasses import dataclass
from typing import Dict, Union

import torch

from src.config import ScheduleKind
from src.errors import ScheduleDomainError
from src.utils import derive_seed, make_generator

Number = Union[float, torch.Tensor]

_EXPONENTS = {
    ScheduleKind.LINEAR: 1.0,
    ScheduleKind.SQRT: 0.25,
}


def _check_unit_interval(x: Number, name: str) -> None:
    if isinstance(x, torch.Tensor):
        bad = ~((x >= 0) & (x <= 1))
        if bool(bad.any()):
            raise ScheduleDomainError(f"{name} outside [0, 1]: {x[bad].flatten()[:4].tolist()}")
    elif not 0.0 <= x <= 1.0:
        raise ScheduleDomainError(f"{name} outside [0, 1]: {x}")


def _check_open_interval(x: float, name: str) -> None:
    if not 0.0 < x < 1.0:
        raise ScheduleDomainError(f"{name} must lie strictly inside (0, 1), got {x}")


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Power-law noise schedule sigma(t) = t ** exponent.

    Attributes:
        kind (ScheduleKind): LINEAR (exponent 1) or SQRT (exponent 0.25).
    """
    kind: ScheduleKind = ScheduleKind.LINEAR

    @property
    def exponent(self) -> float:
        return _EXPONENTS[self.kind]

    def sigma(self, t: Number) -> Number:
        """
        Noise scale at timestep t.

        Args:
            t: Timestep(s) in [0, 1].

        Returns:
            t for the linear schedule, t ** 0.25 for sqrt.
        """
        _check_unit_interval(t, "t")
        if self.kind is ScheduleKind.LINEAR:
            return t
        return t ** self.exponent

    def alpha(self, t: Number) -> Number:
        """Signal retention sqrt(1 - sigma^2), clamped at 0 against rounding near t = 1."""
        s = self.sigma(t)
        if isinstance(s, torch.Tensor):
            return torch.sqrt(torch.clamp(1.0 - s * s, min=0.0))
        return math.sqrt(max(0.0, 1.0 - s * s))

    def sigma_inverse(self, s: Number) -> Number:
        """
        The unique t with sigma(t) = s.

        Args:
            s: Noise scale(s) in [0, 1].

        Returns:
            s for linear, s ** 4 for sqrt.
        """
        _check_unit_interval(s, "sigma")
        if self.kind is ScheduleKind.LINEAR:
            return s
        return s ** (1.0 / self.exponent)

    def sigma_derivative(self, t: Number) -> Number:
        """d sigma / d t."""
        _check_unit_interval(t, "t")
        p = self.exponent
        if self.kind is ScheduleKind.LINEAR:
            return torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
        if isinstance(t, torch.Tensor):
            return p * t ** (p - 1.0)
        return math.inf if t == 0.0 else p * t ** (p - 1.0)

    def dt_dsigma(self, s: Number) -> Number:
        """Derivative of the inverse schedule, d t / d sigma = (1 / p) * s ** (1/p - 1)."""
        _check_unit_interval(s, "sigma")
        p = self.exponent
        if self.kind is ScheduleKind.LINEAR:
            return torch.ones_like(s) if isinstance(s, torch.Tensor) else 1.0
        return (1.0 / p) * s ** (1.0 / p - 1.0)

    def beta(self, t: Number) -> Number:
        """
        Drift coefficient beta(t) = -2 d log alpha / dt = 2 sigma sigma' / (1 - sigma^2).

        Not consumed by the samplers; exposed for analysis.

        Raises:
            ScheduleDomainError: at t = 1 where beta diverges.
        """
        _check_unit_interval(t, "t")
        at_one = bool((t >= 1.0).any()) if isinstance(t, torch.Tensor) else t >= 1.0
        if at_one:
            raise ScheduleDomainError("beta(t) diverges at t = 1")
        s = self.sigma(t)
        p = self.exponent
        # sigma * sigma' = p * t^(2p - 1)
        if not isinstance(t, torch.Tensor) and t == 0.0 and p < 0.5:
            return math.inf
        return 2.0 * p * t ** (2.0 * p - 1.0) / (1.0 - s * s)


def effective_weight(from_schedule: NoiseSchedule, to_schedule: NoiseSchedule, sigma_value: float) -> float:
    """
    Weight turning uniform-time training under ``to_schedule`` into uniform-time
    training under ``from_schedule``, evaluated at noise scale sigma.

    With base weight w(t) = 1 and uniform time density r(t) = 1, uniform t under a
    schedule induces the sigma-density dt/dsigma. The ratio of the two induced
    densities is the reweighting:

        w'(sigma) = (dt/dsigma)_from / (dt/dsigma)_to

    For ``to_schedule`` linear this is the change of variables to uniform sigma.

    Args:
        from_schedule: Schedule whose uniform-time objective is reproduced.
        to_schedule: Schedule whose samples are reweighted.
        sigma_value: Noise scale, strictly inside (0, 1).

    Returns:
        Positive weight.
    """
    _check_open_interval(sigma_value, "sigma_value")
    return float(from_schedule.dt_dsigma(sigma_value)) / float(to_schedule.dt_dsigma(sigma_value))


class ClippedTimeSampler:
    """
    Draws training timesteps uniformly from [t_min, 1].

    t_min is kept equal to sigma_inverse(sigma_min) of the latest clipping
    estimate; t_min = 0 is the unclipped baseline. The sampler owns its
    generator and is single-writer.
    """

    def __init__(self, schedule: NoiseSchedule, rng_seed: int, t_min: float = 0.0):
        """
        Args:
            schedule: Schedule used to convert sigma_min into t_min.
            rng_seed: Seed of the private generator.
            t_min: Initial lower bound, in [0, 1).
        """
        self.schedule = schedule
        self.rng_seed = rng_seed
        self._t_min = 0.0
        self.t_min = t_min
        self._generator = make_generator(rng_seed)

    @classmethod
    def for_worker(cls, schedule: NoiseSchedule, base_seed: int, worker_id: int) -> "ClippedTimeSampler":
        """Independent sampler for one training worker."""
        return cls(schedule, derive_seed(base_seed, worker_id))

    @property
    def t_min(self) -> float:
        return self._t_min

    @t_min.setter
    def t_min(self, value: float) -> None:
        if not 0.0 <= value < 1.0:
            raise ScheduleDomainError(f"t_min must lie in [0, 1), got {value}")
        self._t_min = float(value)

    def update_from_sigma_min(self, sigma_min: float) -> float:
        """Set t_min = sigma_inverse(sigma_min) and return it."""
        self.t_min = float(self.schedule.sigma_inverse(sigma_min))
        return self.t_min

    def sample(self, n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Draw n timesteps in [t_min, 1]."""
        u = torch.rand(n, generator=self._generator, dtype=torch.float64)
        t = self._t_min + (1.0 - self._t_min) * u
        return t.to(dtype)

    def sample_timestep(self) -> float:
        """Draw a single timestep in [t_min, 1]."""
        return float(self.sample(1)[0])

    def get_state(self) -> Dict[str, object]:
        return {"t_min": self._t_min, "generator": self._generator.get_state()}

    def set_state(self, state: Dict[str, object]) -> None:
        self.t_min = float(state["t_min"])
        self._generator.set_state(state["generator"])
