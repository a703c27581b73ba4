"""
Inference: length beam, per-length sampling, and pooled candidate selection.

For one source the decoder predicts the top-LB target lengths, draws MBR
independent trajectories per length (seed derived from sequence index, beam
rank and sample index), rounds each final position to tokens, and hands the
LB x MBR pool to a selection strategy.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from tqdm import tqdm

from src.config import SamplerConfig
from src.denoiser import ConditionalDenoiser, predict_length
from src.embedding import EmbeddingTable, round_to_tokens
from src.entities import Candidate, CandidateSet
from src.sampler_registry import build_stepper
from src.samplers.base import Stepper
from src.schedules import NoiseSchedule
from src.selection import DEFAULT_SELECTORS, SelectionStrategy
from src.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

SourceInput = Union[torch.Tensor, Sequence[int]]


def _eval(model: ConditionalDenoiser) -> None:
    if isinstance(model, nn.Module):
        model.eval()


def _max_length(model: ConditionalDenoiser) -> Optional[int]:
    config = getattr(model, "config", None)
    return getattr(config, "max_positions", None)


def _encode(model: ConditionalDenoiser, source: SourceInput, pad_id: int):
    ids = torch.as_tensor(source, dtype=torch.long).reshape(1, -1)
    mask = ids != pad_id
    return model.encode(ids, mask), mask


def initial_noise(seeds: Sequence[int], length: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """(len(seeds), length, dim) standard-normal draws, one generator per row."""
    rows = [
        torch.randn(length, dim, generator=make_generator(seed), dtype=torch.float64)
        for seed in seeds
    ]
    return torch.stack(rows).to(dtype)


@torch.no_grad()
def _sample_batch(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    memory: torch.Tensor,
    source_mask: torch.Tensor,
    z: torch.Tensor,
    stepper: Stepper,
) -> List[Tuple[int, ...]]:
    batch = z.shape[0]
    memory = memory.expand(batch, -1, -1)
    source_mask = source_mask.expand(batch, -1)
    z_final = stepper.run(model, z, memory, source_mask)
    return [tuple(row) for row in round_to_tokens(table, z_final).tolist()]


@torch.no_grad()
def sample(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    source: SourceInput,
    length: int,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seed: Optional[int] = None,
    stepper: Optional[Stepper] = None,
) -> Tuple[int, ...]:
    """
    Decode one target of a fixed length.

    Args:
        model: Denoiser.
        table: Embedding table used for rounding.
        source: Source ids.
        length: Target length n >= 1.
        config: Sampler settings.
        schedule: Noise schedule the model was trained with.
        seed: Noise seed, defaults to ``config.seed``.
        stepper: Overrides the stepper built from ``config``.

    Returns:
        Token ids of length n.
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    _eval(model)
    stepper = stepper or build_stepper(config, schedule)
    memory, mask = _encode(model, source, table.pad_id)
    z = initial_noise([config.seed if seed is None else seed], length, table.dim, table.weight.dtype)
    return _sample_batch(model, table, memory, mask, z, stepper)[0]


def length_beam(
    model: ConditionalDenoiser,
    source: SourceInput,
    beam: int,
    pad_id: Optional[int] = None,
    max_length: Optional[int] = None,
) -> List[int]:
    """Top-``beam`` distinct predicted target lengths, best first, each >= 1.

    ``pad_id`` defaults to the model's padding id.
    """
    if beam < 1:
        raise ValueError(f"length beam must be >= 1, got {beam}")
    _eval(model)
    distribution = predict_length(model, source, pad_id)
    return [length for length, _ in distribution.top_lengths(beam, max_length)]


@torch.no_grad()
def decode_candidates(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    source: SourceInput,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    sequence_index: int = 0,
    stepper: Optional[Stepper] = None,
    selector: Optional[SelectionStrategy] = None,
) -> CandidateSet:
    """
    Length-beam x MBR decoding of one source.

    Args:
        model: Denoiser.
        table: Embedding table.
        source: Source ids.
        config: Sampler settings (length_beam, mbr_samples, seed, mode).
        schedule: Noise schedule.
        sequence_index: Position of the source in its corpus; part of every seed.
        stepper: Overrides the stepper built from ``config``.
        selector: Overrides the configured selection strategy.

    Returns:
        CandidateSet with LB x MBR candidates (fewer only if distinct lengths run out).
    """
    _eval(model)
    stepper = stepper or build_stepper(config, schedule)
    selector = selector or DEFAULT_SELECTORS[config.selection]()
    pad_id = table.pad_id
    memory, mask = _encode(model, source, pad_id)
    distribution = predict_length(model, source, pad_id)
    candidates: List[Candidate] = []
    for rank, (length, log_prob) in enumerate(distribution.top_lengths(config.length_beam, _max_length(model))):
        seeds = [derive_seed(config.seed, sequence_index, rank, k) for k in range(config.mbr_samples)]
        z = initial_noise(seeds, length, table.dim, table.weight.dtype)
        for k, tokens in enumerate(_sample_batch(model, table, memory, mask, z, stepper)):
            candidates.append(Candidate(tokens=tokens, length=length, sample_index=k, length_log_prob=log_prob))
    selected, matrix = selector.select(candidates)
    return CandidateSet(
        candidates=candidates,
        utility_matrix=matrix,
        selected=selected,
        nfe=stepper.nfe_per_sample * len(candidates),
    )


def decode_corpus(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    sources: Sequence[SourceInput],
    config: SamplerConfig,
    schedule: NoiseSchedule,
    selector: Optional[SelectionStrategy] = None,
    progress: bool = False,
) -> List[CandidateSet]:
    """
    Decode every source; outputs do not depend on order or batching.

    Returns:
        One CandidateSet per source.
    """
    stepper = build_stepper(config, schedule)
    results = [
        decode_candidates(model, table, src, config, schedule, i, stepper, selector)
        for i, src in enumerate(tqdm(sources, desc=f"decode[{config.mode.value}]", disable=not progress))
    ]
    nfe = sum(r.nfe for r in results)
    logger.info(
        "decoded %d sources: mode=%s steps=%d LB=%d MBR=%d nfe=%d",
        len(results), config.mode.value, config.steps, config.length_beam, config.mbr_samples, nfe,
    )
    return results
