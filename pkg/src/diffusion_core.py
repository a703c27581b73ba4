"""
Forward diffusion, the three training losses, and one optimisation step.

    z_t   = alpha(t) * Emb(y) + sigma(t) * eps
    L_mse = sum_D ||z_theta(z_t, x, t) - z0||^2, averaged over real positions
    L_rec = -log softmax(-||z0 - e_v||^2)[y], averaged over real positions
    L_len = cross-entropy of the length-offset head
"""

import logging
from typing import Iterable, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from src.denoiser import ConditionalDenoiser
from src.embedding import EmbeddingTable, embed
from src.entities import DiffusionBatch, Example, LossBreakdown
from src.errors import DimensionError, NonFiniteLossError, UndefinedStatisticError
from src.schedules import NoiseSchedule
from src.utils import pad_sequences

logger = logging.getLogger(__name__)

SelfCondInput = Union[bool, torch.Tensor]

# Slack on the clipping lower bound, absorbs sigma_inverse round-off.
SIGMA_MIN_TOLERANCE = 1e-9


def _per_example(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast (B,) coefficients against (B, n, D)."""
    return values.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(
    z0: torch.Tensor,
    t: torch.Tensor,
    epsilon: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    Corrupt clean embeddings: alpha(t) * z0 + sigma(t) * epsilon.

    Args:
        z0: (B, n, D) clean embeddings.
        t: (B,) timesteps in [0, 1].
        epsilon: Standard-normal noise shaped like z0.
        schedule: Noise schedule.

    Returns:
        (B, n, D) noisy embeddings.
    """
    if epsilon.shape != z0.shape:
        raise DimensionError(f"epsilon shape {tuple(epsilon.shape)} != z0 shape {tuple(z0.shape)}")
    if t.dim() != 1 or t.shape[0] != z0.shape[0]:
        raise DimensionError(f"t must be ({z0.shape[0]},), got {tuple(t.shape)}")
    alpha = _per_example(schedule.alpha(t), z0)
    sigma = _per_example(schedule.sigma(t), z0)
    return alpha * z0 + sigma * epsilon


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, name: str) -> torch.Tensor:
    count = mask.sum()
    if int(count) == 0:
        raise UndefinedStatisticError(f"{name}: every position is masked")
    return (values * mask.to(values.dtype)).sum() / count.to(values.dtype)


def diffusion_loss(z_hat: torch.Tensor, z0: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error summed over D, averaged over real positions."""
    if z_hat.shape != z0.shape:
        raise DimensionError(f"z_hat shape {tuple(z_hat.shape)} != z0 shape {tuple(z0.shape)}")
    return _masked_mean(((z_hat - z0) ** 2).sum(-1), mask, "diffusion_loss")


def reconstruction_loss(
    z0: torch.Tensor,
    target: torch.Tensor,
    table: EmbeddingTable,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Token NLL of the distance-softmax head, averaged over real positions."""
    logits = table.token_logits(z0)
    nll = F.cross_entropy(
        logits.reshape(-1, table.vocab_size),
        target.reshape(-1),
        reduction="none",
    ).reshape(target.shape)
    # pad positions carry -inf logits for their own target
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    return _masked_mean(nll, mask, "reconstruction_loss")


def length_targets(source_mask: torch.Tensor, target_mask: torch.Tensor, k: int) -> torch.Tensor:
    """Class index (offset + K) of len(y) - len(x), clamped to [-K, K]."""
    offsets = target_mask.sum(1) - source_mask.sum(1)
    return offsets.clamp(-k, k) + k


def length_loss(
    model: ConditionalDenoiser,
    memory: torch.Tensor,
    source_mask: torch.Tensor,
    target_mask: torch.Tensor,
) -> torch.Tensor:
    logits = model.length_logits(memory, source_mask)
    k = (logits.shape[-1] - 1) // 2
    return F.cross_entropy(logits, length_targets(source_mask, target_mask, k))


def assemble_batch(
    examples: Sequence[Example],
    table: EmbeddingTable,
    schedule: NoiseSchedule,
    t: torch.Tensor,
    epsilon: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    pad_id: Optional[int] = None,
) -> DiffusionBatch:
    """
    Pad examples and draw the forward-diffusion sample.

    Args:
        examples: Source/target pairs.
        table: Target embedding table (z0 keeps its graph to the table).
        schedule: Noise schedule.
        t: (B,) timesteps.
        epsilon: Noise override; drawn from ``generator`` when omitted.
        generator: Noise generator.
        pad_id: Padding id, defaults to the table's.

    Returns:
        DiffusionBatch with z0 and zt populated.
    """
    if not examples:
        raise UndefinedStatisticError("cannot assemble an empty batch")
    pad = table.pad_id if pad_id is None else pad_id
    source, source_mask = pad_sequences([ex.src for ex in examples], pad)
    target, target_mask = pad_sequences([ex.tgt for ex in examples], pad)
    z0 = embed(table, target)
    t = t.to(z0.dtype)
    if epsilon is None:
        epsilon = torch.randn(z0.shape, generator=generator, dtype=torch.float64).to(z0.dtype)
    zt = forward_diffuse(z0, t, epsilon, schedule)
    return DiffusionBatch(
        source=source,
        source_mask=source_mask,
        target=target,
        target_mask=target_mask,
        t=t,
        epsilon=epsilon,
        z0=z0,
        zt=zt,
        example_ids=[ex.index for ex in examples],
    )


def self_cond_rows(use_self_cond: SelfCondInput, batch_size: int) -> torch.Tensor:
    """(B,) bool mask of rows that get a self-conditioning estimate."""
    if isinstance(use_self_cond, torch.Tensor):
        rows = use_self_cond.to(torch.bool).reshape(-1)
        if rows.shape[0] != batch_size:
            raise DimensionError(f"self-conditioning mask must be ({batch_size},), got {tuple(rows.shape)}")
        return rows
    return torch.full((batch_size,), bool(use_self_cond))


def compute_losses(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    batch: DiffusionBatch,
    use_self_cond: SelfCondInput = False,
    length_weight: float = 0.1,
):
    """
    Forward pass and the weighted total.

    ``use_self_cond`` is a bool for the whole batch or a (B,) bool mask. Selected
    rows get a first gradient-free pass at the same t whose z0 estimate is fed
    back as self-conditioning input; the other rows see zeros.

    Returns:
        (total, LossBreakdown)
    """
    memory = model.encode(batch.source, batch.source_mask)
    self_cond = None
    rows = self_cond_rows(use_self_cond, batch.zt.shape[0])
    if bool(rows.any()):
        with torch.no_grad():
            estimate = model.decode(
                batch.zt, memory, batch.source_mask, batch.t, None, batch.target_mask,
            ).detach()
        self_cond = estimate * _per_example(rows, estimate)
    z_hat = model.decode(batch.zt, memory, batch.source_mask, batch.t, self_cond, batch.target_mask)
    mse = diffusion_loss(z_hat, batch.z0, batch.target_mask)
    rec = reconstruction_loss(batch.z0, batch.target, table, batch.target_mask)
    length = length_loss(model, memory, batch.source_mask, batch.target_mask)
    total = mse + rec + length_weight * length
    breakdown = LossBreakdown(
        diffusion_mse=float(mse.detach()),
        reconstruction_nll=float(rec.detach()),
        length_nll=float(length.detach()),
    )
    return total, breakdown


def _parameters(*modules: nn.Module) -> Iterable[torch.nn.Parameter]:
    seen = set()
    for module in modules:
        for p in module.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                yield p


def _non_finite(batch: DiffusionBatch, schedule: NoiseSchedule, step: int, detail: str) -> NonFiniteLossError:
    t = batch.t.detach().double()
    return NonFiniteLossError(
        step=step,
        timesteps=t.tolist(),
        sigmas=schedule.sigma(t).tolist(),
        example_ids=batch.example_ids,
        detail=detail,
    )


def train_step(
    model: nn.Module,
    table: EmbeddingTable,
    optimizer: torch.optim.Optimizer,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    step: int,
    use_self_cond: SelfCondInput = False,
    length_weight: float = 0.1,
    grad_clip: Optional[float] = 1.0,
    sigma_min: Optional[float] = None,
) -> LossBreakdown:
    """
    One gradient update of the denoiser and the embedding table.

    Args:
        model: Denoiser in train mode.
        table: Embedding table (trained jointly).
        optimizer: Optimiser over both.
        batch: Assembled batch.
        schedule: Noise schedule (for diagnostics).
        step: Global step, reported on failure.
        use_self_cond: Self-conditioning switch, whole batch or per row.
        length_weight: Weight of the length loss.
        grad_clip: Global norm bound; None disables.
        sigma_min: Active clipping threshold; every sigma(t) must clear it.

    Raises:
        NonFiniteLossError: if the loss is NaN or Inf (no update is applied), or
            if any embedding row or model parameter is NaN or Inf after the update.
    """
    if sigma_min is not None:
        sigmas = schedule.sigma(batch.t.double())
        low = float(sigmas.min())
        tolerance = max(SIGMA_MIN_TOLERANCE, torch.finfo(batch.t.dtype).eps)
        assert low >= sigma_min - tolerance, f"sigma(t)={low} below sigma_min={sigma_min}"

    optimizer.zero_grad(set_to_none=True)
    total, breakdown = compute_losses(model, table, batch, use_self_cond, length_weight)
    if not bool(torch.isfinite(total.detach())):
        raise _non_finite(batch, schedule, step, f"mse={breakdown.diffusion_mse} "
                          f"rec={breakdown.reconstruction_nll} len={breakdown.length_nll}")
    total.backward()
    if grad_clip is not None:
        nn.utils.clip_grad_norm_(list(_parameters(model, table)), grad_clip)
    optimizer.step()
    bad_rows = (~torch.isfinite(table.weight.detach())).any(dim=1).nonzero().flatten().tolist()
    if bad_rows:
        raise _non_finite(batch, schedule, step, f"embedding rows {bad_rows[:8]} not finite after the update")
    bad_params = [name for name, p in model.named_parameters() if not bool(torch.isfinite(p.detach()).all())]
    if bad_params:
        raise _non_finite(batch, schedule, step, f"parameters {bad_params[:4]} not finite after the update")
    return breakdown
