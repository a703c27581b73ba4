"""
Utilities for assembling ExperimentConfig variants.
"""

from dataclasses import replace
from typing import Dict, List, Sequence, Tuple

from src.config import ExperimentConfig, SamplerMode


class ExperimentBuilder:
    """
    Immutable helper for constructing ExperimentConfig objects.
    """

    def __init__(self, base: ExperimentConfig):
        self._config = base

    def clone(self) -> "ExperimentBuilder":
        return ExperimentBuilder(self._config)

    def with_seed(self, seed: int) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = replace(builder._config, seed=seed)
        return builder

    def with_noise_clipping(self, enabled: bool) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = replace(builder._config, train=replace(builder._config.train, noise_clipping=enabled))
        return builder

    def with_mode(self, mode: SamplerMode) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = replace(builder._config, sampler=replace(builder._config.sampler, mode=mode))
        return builder

    def with_mbr(self, samples: int) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = replace(builder._config, sampler=replace(builder._config.sampler, mbr_samples=samples))
        return builder

    def with_train_steps(self, steps: int) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = replace(builder._config, train=replace(builder._config.train, steps=steps))
        return builder

    def with_overrides(self, values: Dict[str, str]) -> "ExperimentBuilder":
        builder = self.clone()
        builder._config = builder._config.with_overrides(values)
        return builder

    def build(self) -> ExperimentConfig:
        return self._config


def ablation_grid(
    base: ExperimentConfig,
    seeds: Sequence[int],
    mbr_sizes: Sequence[int] = (1, 10),
) -> List[Tuple[Tuple[bool, int], List[Tuple[SamplerMode, int, ExperimentConfig]]]]:
    """
    Training runs of the clipping ablation and the decodes each is scored with.

    Returns:
        ((noise_clipping, seed), [(mode, mbr, config), ...]) per training run.
    """
    runs = []
    for clipping in (True, False):
        for seed in seeds:
            trained = ExperimentBuilder(base).with_noise_clipping(clipping).with_seed(seed)
            decodes = [
                (mode, mbr, trained.with_mode(mode).with_mbr(mbr).build())
                for mode in (SamplerMode.DDIM, SamplerMode.CEDI)
                for mbr in mbr_sizes
            ]
            runs.append(((clipping, seed), decodes))
    return runs
