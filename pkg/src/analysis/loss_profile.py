"""
Validation diffusion loss as a function of the noise scale, and the noise-scale
distribution the training sampler actually visits.
"""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from src.denoiser import ConditionalDenoiser
from src.diffusion_core import diffusion_loss
from src.embedding import EmbeddingTable, embed
from src.entities import Example
from src.errors import EmptyCorpusError
from src.schedules import ClippedTimeSampler, NoiseSchedule
from src.utils import derive_seed, make_generator, pad_sequences

logger = logging.getLogger(__name__)


def example_batches(examples: Sequence[Example], batch_size: int) -> List[Sequence[Example]]:
    return [examples[i:i + batch_size] for i in range(0, len(examples), batch_size)]


@torch.no_grad()
def loss_at_sigma(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    batch: Sequence[Example],
    sigma: float,
    schedule: NoiseSchedule,
    noise: torch.Tensor,
) -> Tuple[float, int]:
    """
    Summed per-position diffusion loss of one batch corrupted at exactly ``sigma``.

    Returns:
        (sum of per-position losses, number of positions)
    """
    pad = table.pad_id
    source, source_mask = pad_sequences([ex.src for ex in batch], pad)
    target, target_mask = pad_sequences([ex.tgt for ex in batch], pad)
    z0 = embed(table, target).detach()
    alpha = math.sqrt(max(0.0, 1.0 - sigma * sigma))
    zt = alpha * z0 + sigma * noise.to(z0.dtype)
    t = float(schedule.sigma_inverse(sigma))
    memory = model.encode(source, source_mask)
    z_hat = model.decode(zt, memory, source_mask, t, None, target_mask)
    count = int(target_mask.sum())
    return float(diffusion_loss(z_hat, z0, target_mask)) * count, count


def loss_vs_sigma_profile(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    examples: Sequence[Example],
    sigma_grid: Sequence[float],
    schedule: NoiseSchedule,
    seed: int = 0,
    batch_size: int = 64,
    progress: bool = False,
) -> List[Tuple[float, float]]:
    """
    Mean validation diffusion loss at each noise scale.

    The model is shown t = sigma_inverse(sigma) under its training schedule.
    Noise draws are shared across scales.

    Returns:
        List of (sigma, mean diffusion loss per position).
    """
    if not examples:
        raise EmptyCorpusError("loss profile needs validation examples")
    if isinstance(model, nn.Module):
        model.eval()
    batches = example_batches(examples, batch_size)
    noises = []
    for b, batch in enumerate(batches):
        width = max(len(ex.tgt) for ex in batch)
        gen = make_generator(derive_seed(seed, b))
        noises.append(torch.randn(len(batch), width, table.dim, generator=gen, dtype=torch.float64))

    rows = []
    for sigma in tqdm(sigma_grid, desc="loss-profile", disable=not progress):
        total, count = 0.0, 0
        for batch, noise in zip(batches, noises):
            s, c = loss_at_sigma(model, table, batch, float(sigma), schedule, noise)
            total, count = total + s, count + c
        rows.append((float(sigma), total / count))
    return rows


def sigma_histogram(
    schedule: NoiseSchedule,
    t_min: float = 0.0,
    bins: int = 20,
    n: int = 100_000,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Histogram of sigma(t) for t drawn by the training time sampler.

    Returns:
        (bin edges over [0, 1], counts)
    """
    sampler = ClippedTimeSampler(schedule, seed, t_min)
    sigmas = schedule.sigma(sampler.sample(n)).numpy()
    counts, edges = np.histogram(sigmas, bins=bins, range=(0.0, 1.0))
    return edges, counts
