"""
Uniform-time training under one schedule equals reweighted training under another.

    E_{t ~ U(0,1)}[ L(sigma_from(t)) ] = E_{sigma ~ U(0,1)}[ w(sigma) L(sigma) ]

with w = effective_weight(from, linear). Both sides are estimated from the
same uniforms, example picks and noise draws.
"""

import logging
import math
from typing import Sequence, Tuple

import torch
from torch import nn

from src.config import ScheduleKind
from src.denoiser import ConditionalDenoiser
from src.embedding import EmbeddingTable, embed
from src.entities import Example
from src.errors import EmptyCorpusError
from src.schedules import NoiseSchedule, effective_weight
from src.utils import chunk_ranges, derive_seed, make_generator, pad_sequences

logger = logging.getLogger(__name__)

_EDGE = 1e-9


@torch.no_grad()
def per_example_loss(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    examples: Sequence[Example],
    sigmas: torch.Tensor,
    noise: torch.Tensor,
    model_schedule: NoiseSchedule,
) -> torch.Tensor:
    """Diffusion loss of each example at its own sigma, (B,) in float64."""
    pad = table.pad_id
    source, source_mask = pad_sequences([ex.src for ex in examples], pad)
    target, target_mask = pad_sequences([ex.tgt for ex in examples], pad)
    z0 = embed(table, target).detach()
    sig = sigmas.to(z0.dtype)[:, None, None]
    zt = torch.sqrt(torch.clamp(1.0 - sig * sig, min=0.0)) * z0 + sig * noise[:, :z0.shape[1]].to(z0.dtype)
    t = model_schedule.sigma_inverse(sigmas.to(z0.dtype))
    memory = model.encode(source, source_mask)
    z_hat = model.decode(zt, memory, source_mask, t, None, target_mask)
    err = ((z_hat - z0) ** 2).sum(-1) * target_mask.to(z0.dtype)
    return (err.sum(1) / target_mask.sum(1).to(z0.dtype)).double()


def schedule_equivalence_check(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    examples: Sequence[Example],
    n_samples: int,
    seed: int = 0,
    from_schedule: NoiseSchedule = NoiseSchedule(ScheduleKind.SQRT),
    model_schedule: NoiseSchedule = NoiseSchedule(ScheduleKind.LINEAR),
    batch_size: int = 512,
) -> Tuple[float, float, float]:
    """
    Monte-Carlo check of the reweighting identity on a frozen model.

    Args:
        model: Frozen denoiser.
        table: Embedding table.
        examples: Validation examples.
        n_samples: Draws per side.
        seed: Seed for uniforms, example picks and noise.
        from_schedule: Schedule of the uniform-time side.
        model_schedule: Schedule the model maps sigma to its input t with.
        batch_size: Draws per forward pass.

    Returns:
        (lhs, rhs, |lhs - rhs| / lhs)
    """
    if not examples:
        raise EmptyCorpusError("schedule equivalence needs examples")
    if isinstance(model, nn.Module):
        model.eval()
    linear = NoiseSchedule(ScheduleKind.LINEAR)
    gen = make_generator(derive_seed(seed, 0))
    u = torch.rand(n_samples, generator=gen, dtype=torch.float64).clamp(_EDGE, 1.0 - _EDGE)
    picks = torch.randint(len(examples), (n_samples,), generator=gen)
    width = max(len(ex.tgt) for ex in examples)

    lhs_terms, rhs_terms = [], []
    for start, stop in chunk_ranges(n_samples, batch_size):
        batch = [examples[int(i)] for i in picks[start:stop]]
        noise_gen = make_generator(derive_seed(seed, 1, start))
        noise = torch.randn(stop - start, width, table.dim, generator=noise_gen, dtype=torch.float64)
        uu = u[start:stop]
        sig_from = from_schedule.sigma(uu)
        lhs_terms.append(per_example_loss(model, table, batch, sig_from, noise, model_schedule))
        weights = torch.tensor([effective_weight(from_schedule, linear, float(s)) for s in uu], dtype=torch.float64)
        rhs_terms.append(weights * per_example_loss(model, table, batch, uu, noise, model_schedule))
    lhs = float(torch.cat(lhs_terms).mean())
    rhs = float(torch.cat(rhs_terms).mean())
    gap = abs(lhs - rhs) / lhs if lhs != 0.0 else math.inf
    logger.info("schedule equivalence n=%d: lhs=%.6g rhs=%.6g gap=%.4f", n_samples, lhs, rhs, gap)
    return lhs, rhs, gap
