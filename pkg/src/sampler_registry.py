"""
Default stepper registry.

Maps sampler modes to Stepper constructors so decoding code does not
hard-code imports.
"""

from typing import Callable, Dict, Optional

from src.config import SamplerConfig, SamplerMode
from src.samplers import CeDiStepper, DDIMStepper, Stepper
from src.schedules import NoiseSchedule

StepperFactory = Callable[[SamplerConfig, NoiseSchedule], Stepper]


def _ddim(config: SamplerConfig, schedule: NoiseSchedule) -> Stepper:
    return DDIMStepper(schedule, config.steps, config.t_terminal)


DEFAULT_STEPPERS: Dict[SamplerMode, StepperFactory] = {
    SamplerMode.DDIM: _ddim,
    SamplerMode.CEDI: CeDiStepper.from_config,
}


def build_stepper(
    config: SamplerConfig,
    schedule: NoiseSchedule,
    steppers: Optional[Dict[SamplerMode, StepperFactory]] = None,
) -> Stepper:
    factories = {**DEFAULT_STEPPERS, **(steppers or {})}
    return factories[config.mode](config, schedule)
