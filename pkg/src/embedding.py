"""
Target token embeddings and the geometry-derived clipping threshold.

The table maps token ids to D-dimensional rows (z0 is a Dirac at the row, no
added noise). Its nearest-neighbour spread delta^2 fixes the smallest noise
scale sigma_min that still corrupts a token beyond trivial recovery:

    delta^2   = 1 / (V' D) * sum_i min_{j != i} ||e_i - e_j||^2
    sigma_min = (1 / delta^2 + 1) ** -0.5

Pad is excluded from the statistic and from rounding targets.
"""

import logging
import math
from typing import Iterable, Optional, Sequence, Union

import torch
from torch import nn

from src.entities import ClippingEstimate
from src.errors import DimensionError, UndefinedStatisticError
from src.schedules import ClippedTimeSampler, NoiseSchedule
from src.utils import chunk_ranges

logger = logging.getLogger(__name__)

# Elements per (chunk, V, D) distance block.
_BLOCK_ELEMENTS = 8_000_000


class EmbeddingTable(nn.Module):
    """
    Learnable V x D target embeddings.

    Attributes:
        weight (Parameter): The embedding matrix.
        pad_id (int): Row excluded from statistics and rounding.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        pad_id: int,
        generator: Optional[torch.Generator] = None,
        weight: Optional[torch.Tensor] = None,
    ):
        """
        Initialise rows i.i.d. N(0, 1/D) unless ``weight`` is given.

        Args:
            vocab_size: Number of rows V.
            dim: Embedding dimension D.
            pad_id: Padding token id.
            generator: Optional seeded generator.
            weight: Explicit (V, D) matrix.
        """
        super().__init__()
        if weight is None:
            weight = torch.randn(vocab_size, dim, generator=generator) / math.sqrt(dim)
        elif tuple(weight.shape) != (vocab_size, dim):
            raise DimensionError(f"weight shape {tuple(weight.shape)} != ({vocab_size}, {dim})")
        self.weight = nn.Parameter(weight.detach().clone())
        self.pad_id = pad_id

    @classmethod
    def from_matrix(cls, matrix: torch.Tensor, pad_id: int) -> "EmbeddingTable":
        return cls(matrix.shape[0], matrix.shape[1], pad_id, weight=matrix)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def token_ids(self, exclude: Iterable[int] = ()) -> torch.Tensor:
        """Ascending ids with ``exclude`` removed."""
        keep = torch.ones(self.vocab_size, dtype=torch.bool)
        for i in exclude:
            keep[i] = False
        return torch.nonzero(keep, as_tuple=False).squeeze(1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return embed(self, tokens)

    def token_logits(self, z: torch.Tensor) -> torch.Tensor:
        """
        Distance-softmax logits -||z - e_v||^2, with pad at -inf.

        Args:
            z: (..., D) positions.

        Returns:
            (..., V) logits.
        """
        rows = self.weight
        sq = (z * z).sum(-1, keepdim=True) - 2.0 * z @ rows.t() + (rows * rows).sum(-1)
        pad = torch.zeros(self.vocab_size, dtype=torch.bool, device=z.device)
        pad[self.pad_id] = True
        return (-sq).masked_fill(pad, -math.inf)


def embed(table: EmbeddingTable, tokens: Union[torch.Tensor, Sequence[int]]) -> torch.Tensor:
    """
    Look up clean embeddings z0 = Emb(y).

    Args:
        table: Embedding table.
        tokens: Token ids of any shape (a plain sequence is treated as 1-D).

    Returns:
        Tensor of shape tokens.shape + (D,).

    Raises:
        IndexError: if an id is >= V or negative.
    """
    ids = torch.as_tensor(tokens, dtype=torch.long)
    if ids.numel() == 0:
        return table.weight.new_zeros(tuple(ids.shape) + (table.dim,))
    if int(ids.max()) >= table.vocab_size or int(ids.min()) < 0:
        raise IndexError(f"token id out of range [0, {table.vocab_size})")
    return table.weight[ids]


def _as_matrix(table: Union[EmbeddingTable, torch.Tensor]) -> torch.Tensor:
    return table.weight if isinstance(table, EmbeddingTable) else table


def nearest_neighbor_sq_distances(rows: torch.Tensor) -> torch.Tensor:
    """
    Exact brute-force squared distance from each row to its nearest other row.

    Args:
        rows: (V, D) matrix, V >= 2.

    Returns:
        (V,) tensor in float64.
    """
    rows = rows.detach().to(torch.float64)
    count, dim = rows.shape
    if count < 2:
        raise UndefinedStatisticError(f"need at least 2 rows, got {count}")
    chunk = max(1, _BLOCK_ELEMENTS // max(1, count * dim))
    mins = torch.empty(count, dtype=torch.float64)
    for start, stop in chunk_ranges(count, chunk):
        block = rows[start:stop]
        d2 = ((block[:, None, :] - rows[None, :, :]) ** 2).sum(-1)
        d2[torch.arange(stop - start), torch.arange(start, stop)] = math.inf
        mins[start:stop] = d2.min(dim=1).values
    return mins


def min_pairwise_delta_sq(table: Union[EmbeddingTable, torch.Tensor], exclude: Iterable[int] = ()) -> float:
    """
    Dimension-normalised mean nearest-neighbour squared distance.

    Args:
        table: Embedding table (or raw V x D matrix).
        exclude: Token ids left out of the statistic (pad, typically).

    Returns:
        delta^2 = sum_i min_j ||e_i - e_j||^2 / (V' * D) over the V' kept rows.

    Raises:
        UndefinedStatisticError: if fewer than 2 rows remain.
    """
    matrix = _as_matrix(table)
    excluded = set(exclude)
    keep = [i for i in range(matrix.shape[0]) if i not in excluded]
    if len(keep) < 2:
        raise UndefinedStatisticError(f"need at least 2 non-excluded rows, got {len(keep)}")
    rows = matrix.detach()[torch.as_tensor(keep, dtype=torch.long)]
    mins = nearest_neighbor_sq_distances(rows)
    return float(mins.sum()) / (len(keep) * matrix.shape[1])


def sigma_min_from_delta_sq(delta_sq: float) -> float:
    """(1 / delta^2 + 1) ** -0.5, written as sqrt(delta^2 / (1 + delta^2)); 0 when delta^2 = 0."""
    if delta_sq < 0:
        raise ValueError(f"delta_sq must be non-negative, got {delta_sq}")
    if delta_sq == 0.0:
        logger.warning("collapsed embeddings: nearest-neighbour distance is 0, sigma_min = 0")
        return 0.0
    if math.isinf(delta_sq):
        return 1.0
    return math.sqrt(delta_sq / (1.0 + delta_sq))


def sigma_min(table: EmbeddingTable) -> float:
    """Clipping threshold of the table, pad excluded."""
    return sigma_min_from_delta_sq(min_pairwise_delta_sq(table, exclude=(table.pad_id,)))


def estimate_clipping(table: EmbeddingTable, step: int = 0) -> ClippingEstimate:
    """Fresh ClippingEstimate for the current table."""
    delta_sq = min_pairwise_delta_sq(table, exclude=(table.pad_id,))
    return ClippingEstimate(delta_sq=delta_sq, sigma_min=sigma_min_from_delta_sq(delta_sq), step_computed=step)


def refresh_clipping(
    table: EmbeddingTable,
    schedule: NoiseSchedule,
    sampler: ClippedTimeSampler,
    current_step: int,
    refresh_every: int,
    cached: Optional[ClippingEstimate] = None,
    apply: bool = True,
) -> ClippingEstimate:
    """
    Recompute the clipping estimate on the refresh cadence.

    Args:
        table: Embedding table being trained.
        schedule: Noise schedule (for sigma_inverse).
        sampler: Time sampler whose t_min is updated.
        current_step: Training step.
        refresh_every: Cadence; 1 recomputes every step.
        cached: Previous estimate, returned unchanged between refreshes.
        apply: Update the sampler's t_min (False when clipping is disabled
            and the estimate is only logged).

    Returns:
        The current ClippingEstimate.
    """
    if refresh_every < 1:
        raise ValueError(f"refresh_every must be >= 1, got {refresh_every}")
    if cached is not None and current_step % refresh_every != 0:
        return cached
    estimate = estimate_clipping(table, current_step)
    if apply:
        t_min = sampler.update_from_sigma_min(estimate.sigma_min)
    else:
        t_min = sampler.t_min
    logger.info(
        "step %d: delta^2=%.6g sigma_min=%.4f t_min=%.4f",
        current_step, estimate.delta_sq, estimate.sigma_min, t_min,
    )
    return estimate


def nearest_rows(rows: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """
    Index of the nearest row for each point, by exact squared distance.

    Args:
        rows: (V, D) candidates.
        points: (N, D) queries.

    Returns:
        (N,) long indices into ``rows``; ties go to the lowest index.
    """
    rows = rows.to(points.dtype)
    chunk = max(1, _BLOCK_ELEMENTS // max(1, rows.shape[0] * rows.shape[1]))
    out = torch.empty(points.shape[0], dtype=torch.long)
    for start, stop in chunk_ranges(points.shape[0], chunk):
        d2 = ((points[start:stop, None, :] - rows[None, :, :]) ** 2).sum(-1)
        out[start:stop] = d2.argmin(dim=1)
    return out


def round_to_tokens(table: EmbeddingTable, z: torch.Tensor) -> torch.Tensor:
    """
    Map continuous positions to the nearest non-pad embedding row.

    Ties go to the lowest token id.

    Args:
        table: Embedding table.
        z: (n, D) or (B, n, D) positions.

    Returns:
        Long tensor of ids with shape z.shape[:-1].
    """
    if z.shape[-1] != table.dim:
        raise DimensionError(f"expected last dim {table.dim}, got {tuple(z.shape)}")
    lead = z.shape[:-1]
    flat = z.detach().reshape(-1, table.dim)
    if flat.shape[0] == 0:
        return torch.empty(lead, dtype=torch.long)
    ids = table.token_ids(exclude=(table.pad_id,))
    return ids[nearest_rows(table.weight.detach()[ids], flat)].reshape(lead)


def duplicate_rows(table: EmbeddingTable) -> int:
    """Count non-pad rows whose nearest neighbour coincides with them exactly."""
    ids = table.token_ids(exclude=(table.pad_id,))
    if ids.numel() < 2:
        return 0
    mins = nearest_neighbor_sq_distances(table.weight.detach()[ids])
    return int((mins == 0).sum())
