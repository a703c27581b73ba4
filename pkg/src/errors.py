"""
Exception hierarchy for the toolkit.

Every error raised on purpose derives from SeqDiffError so the CLI can map it
to a distinct exit code.
"""

from typing import Optional, Sequence


class SeqDiffError(Exception):
    """Root of all toolkit errors."""

    exit_code: int = 1
    kind: str = "internal"


class ScheduleDomainError(SeqDiffError, ValueError):
    """A timestep or noise scale fell outside the schedule's domain."""

    kind = "schedule_domain"


class DimensionError(SeqDiffError, ValueError):
    """Tensor shapes do not line up."""

    kind = "dimension"


class UndefinedStatisticError(SeqDiffError, ValueError):
    """A statistic was requested on too little data (e.g. fewer than 2 rows)."""

    kind = "undefined_statistic"


class DenoiserInputError(SeqDiffError, ValueError):
    """The denoiser received non-finite or malformed inputs."""

    kind = "denoiser_input"


class ProbeInputError(SeqDiffError, ValueError):
    """Condition-reliance probe triples are inconsistent."""

    kind = "probe_input"


class EmptyCorpusError(SeqDiffError, ValueError):
    """BLEU was requested on an empty corpus."""

    kind = "empty_corpus"


class UsageError(SeqDiffError):
    """Unknown CLI flag or subcommand."""

    exit_code = 2
    kind = "usage"


class MissingFileError(SeqDiffError, FileNotFoundError):
    """A required input file does not exist."""

    exit_code = 3
    kind = "missing_file"


class ConfigError(SeqDiffError, ValueError):
    """A config file or override could not be parsed."""

    exit_code = 4
    kind = "config"


class CheckpointFormatError(SeqDiffError):
    """A checkpoint was written with an incompatible format version."""

    exit_code = 5
    kind = "checkpoint_format"


class NonFiniteLossError(SeqDiffError, RuntimeError):
    """
    Training produced a NaN/Inf loss.

    Carries the diagnostic dump needed to reproduce the failing batch.
    """

    exit_code = 6
    kind = "non_finite_loss"

    def __init__(
        self,
        step: int,
        timesteps: Sequence[float],
        sigmas: Sequence[float],
        example_ids: Sequence[int],
        detail: Optional[str] = None,
    ):
        self.step = step
        self.timesteps = list(timesteps)
        self.sigmas = list(sigmas)
        self.example_ids = list(example_ids)
        message = (
            f"non-finite loss at step {step}: t={self.timesteps} "
            f"sigma={self.sigmas} example_ids={self.example_ids}"
        )
        if detail:
            message += f" ({detail})"
        super().__init__(message)
