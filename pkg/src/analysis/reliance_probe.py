"""
Does the denoiser follow the source or the noisy input?

Corrupt a mismatched target y' (same length as the true y) and ask the model
to denoise it given the source x. A model that relies on x pulls the estimate
towards Emb(y); one that relies on z_t stays near Emb(y'). Comparing the
model-facing timestep tau = t with a fixed large tau shows how much the
indicated noise level shifts that reliance.
"""

import logging
import math
import random
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple

import torch
from torch import nn

from src.denoiser import ConditionalDenoiser
from src.embedding import EmbeddingTable, embed
from src.entities import Example
from src.errors import ProbeInputError
from src.schedules import NoiseSchedule
from src.utils import derive_seed, make_generator, pad_sequences

logger = logging.getLogger(__name__)

LARGE_TAU = 0.995

Triple = Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]


def build_probe_triples(examples: Sequence[Example], seed: int = 0) -> List[Triple]:
    """
    (x, y, y') with y' a different target of the same length.

    Examples whose length has no distinct partner are skipped.
    """
    by_length: Dict[int, List[Example]] = defaultdict(list)
    for ex in examples:
        by_length[len(ex.tgt)].append(ex)
    rng = random.Random(seed)
    triples = []
    for ex in examples:
        partners = [other.tgt for other in by_length[len(ex.tgt)] if other.tgt != ex.tgt]
        if partners:
            triples.append((ex.src, ex.tgt, rng.choice(partners)))
    return triples


def _sq_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sequence mean over positions of the squared distance summed over D."""
    return ((a - b) ** 2).sum(-1).mean(-1)


@torch.no_grad()
def condition_reliance_probe(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    triples: Sequence[Triple],
    t_grid: Sequence[float],
    schedule: NoiseSchedule,
    large_tau: float = LARGE_TAU,
    seed: int = 0,
) -> List[Tuple[float, str, float, float]]:
    """
    Distance of the denoised misleading input to Emb(y) and Emb(y').

    Args:
        model: Denoiser.
        table: Embedding table.
        triples: (x, y, y') with len(y) == len(y').
        t_grid: Corruption timesteps.
        schedule: Noise schedule used for corruption.
        large_tau: Fixed model-facing timestep of the second policy.
        seed: Noise seed; draws are shared by both policies.

    Returns:
        Rows (t, policy, mse_to_truth, mse_to_negative) with policy "tau=t"
        or "tau=<large_tau>".
    """
    for x, y, y_neg in triples:
        if len(y) != len(y_neg):
            raise ProbeInputError(f"y and y' differ in length: {len(y)} vs {len(y_neg)}")
    if not triples:
        raise ProbeInputError("no probe triples")
    if isinstance(model, nn.Module):
        model.eval()

    groups: Dict[int, List[Triple]] = defaultdict(list)
    for triple in triples:
        groups[len(triple[1])].append(triple)

    rows = []
    for gi, t in enumerate(t_grid):
        t = float(t)
        sums = {"t": [0.0, 0.0], "large": [0.0, 0.0]}
        for length, group in sorted(groups.items()):
            source, source_mask = pad_sequences([g[0] for g in group], table.pad_id)
            z_true = embed(table, torch.tensor([g[1] for g in group])).detach()
            z_neg = embed(table, torch.tensor([g[2] for g in group])).detach()
            gen = make_generator(derive_seed(seed, gi, length))
            noise = torch.randn(z_neg.shape, generator=gen, dtype=torch.float64).to(z_neg.dtype)
            zt = schedule.alpha(t) * z_neg + schedule.sigma(t) * noise
            memory = model.encode(source, source_mask)
            for policy, tau in (("t", t), ("large", large_tau)):
                z_hat = model.decode(zt, memory, source_mask, tau)
                sums[policy][0] += float(_sq_distance(z_hat, z_true).sum())
                sums[policy][1] += float(_sq_distance(z_hat, z_neg).sum())
        n = len(triples)
        rows.append((t, "tau=t", sums["t"][0] / n, sums["t"][1] / n))
        rows.append((t, f"tau={large_tau:g}", sums["large"][0] / n, sums["large"][1] / n))
    return rows


def average_over_t(
    rows: Sequence[Tuple[float, str, float, float]],
    low: float,
    high: float,
) -> Dict[str, Tuple[float, float]]:
    """Policy -> (mean mse_to_truth, mean mse_to_negative) over low <= t <= high."""
    acc: Dict[str, List[Tuple[float, float]]] = defaultdict(list)
    for t, policy, truth, negative in rows:
        if low <= t <= high:
            acc[policy].append((truth, negative))
    return {
        policy: (math.fsum(v[0] for v in vals) / len(vals), math.fsum(v[1] for v in vals) / len(vals))
        for policy, vals in acc.items()
    }
