"""
How recoverable is a token from its corrupted embedding by nearest neighbour alone?

With a frozen table of V standard-Gaussian rows, corrupt a uniformly chosen row
at noise scale sigma and check whether the nearest row is still the original.
High accuracy at a given sigma means denoising there is trivial and carries
little learning signal.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import torch
from scipy.stats import norm
from tqdm import tqdm

from src.embedding import nearest_rows
from src.errors import UndefinedStatisticError
from src.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 50_000


def default_sigma_grid(points: int = 50) -> List[float]:
    """``points`` uniform values strictly inside (0, 1)."""
    return [(i + 1) / (points + 1) for i in range(points)]


def nn_recovery_experiment(
    vocab_size: int,
    dim: int,
    sigma_grid: Sequence[float],
    samples_per_sigma: int = DEFAULT_SAMPLES,
    seed: int = 0,
    table: Optional[torch.Tensor] = None,
    progress: bool = False,
) -> List[Tuple[float, float]]:
    """
    Nearest-neighbour recovery accuracy for each noise scale.

    The same row choices and noise draws are reused at every sigma, so the
    curve is monotone up to geometry rather than sampling noise.

    Args:
        vocab_size: V >= 2 (ignored when ``table`` is given).
        dim: D >= 1 (ignored when ``table`` is given).
        sigma_grid: Noise scales in [0, 1].
        samples_per_sigma: Corrupted points per scale.
        seed: Seed for the table and the draws.
        table: Explicit (V, D) embeddings instead of a Gaussian draw.
        progress: Show a progress bar.

    Returns:
        List of (sigma, accuracy).
    """
    if table is None:
        if vocab_size < 2 or dim < 1:
            raise UndefinedStatisticError(f"need V >= 2 and D >= 1, got V={vocab_size} D={dim}")
        table = torch.randn(vocab_size, dim, generator=make_generator(derive_seed(seed, 0)), dtype=torch.float64)
    table = table.to(torch.float64)
    vocab_size, dim = table.shape
    gen = make_generator(derive_seed(seed, 1))
    truth = torch.randint(vocab_size, (samples_per_sigma,), generator=gen)
    noise = torch.randn(samples_per_sigma, dim, generator=gen, dtype=torch.float64)
    z0 = table[truth]

    rows = []
    for sigma in tqdm(sigma_grid, desc=f"nn-recovery V={vocab_size} D={dim}", disable=not progress):
        sigma = float(sigma)
        alpha = math.sqrt(max(0.0, 1.0 - sigma * sigma))
        zt = alpha * z0 + sigma * noise
        accuracy = float((nearest_rows(table, zt) == truth).double().mean())
        rows.append((sigma, accuracy))
    logger.info("nn recovery V=%d D=%d: %d scales, n=%d", vocab_size, dim, len(rows), samples_per_sigma)
    return rows


def two_point_table(dim: int = 1) -> torch.Tensor:
    """Embeddings at +e1 and -e1."""
    table = torch.zeros(2, dim, dtype=torch.float64)
    table[0, 0], table[1, 0] = 1.0, -1.0
    return table


def closed_form_recovery_accuracy(sigma: float) -> float:
    """
    Exact accuracy for the two-point table at +-e1.

    The nearest row flips only when the noise along e1 exceeds alpha / sigma
    in the wrong direction: accuracy = Phi(sqrt(1 - sigma^2) / sigma).
    """
    if sigma <= 0.0:
        return 1.0
    return float(norm.cdf(math.sqrt(max(0.0, 1.0 - sigma * sigma)) / sigma))
