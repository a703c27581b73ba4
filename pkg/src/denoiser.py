"""
Conditional denoiser z_theta(z_t, x, t) and the length-offset predictor.

A small non-autoregressive encoder-decoder: the encoder reads source tokens, the
decoder reads the noisy target embeddings (concatenated with the
self-conditioning estimate) with full, non-causal self-attention plus
cross-attention, and projects back to the embedding dimension. The timestep
embedding is added to the input of every decoder layer.
"""

import logging
import math
from typing import Optional, Protocol, Sequence, Union

import torch
from torch import nn

from src.config import ModelConfig
from src.entities import LengthDistribution
from src.errors import DenoiserInputError, DimensionError

logger = logging.getLogger(__name__)

TimeInput = Union[float, torch.Tensor]


class ConditionalDenoiser(Protocol):
    """What samplers and analysis need from a denoiser."""

    embed_dim: int
    pad_id: int

    def encode(self, source: torch.Tensor, source_mask: torch.Tensor) -> torch.Tensor: ...

    def decode(
        self,
        z_t: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        t: TimeInput,
        self_cond: Optional[torch.Tensor] = None,
        target_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor: ...

    def length_logits(self, memory: torch.Tensor, source_mask: torch.Tensor) -> torch.Tensor: ...


class TimestepEmbedding(nn.Module):
    """
    Sinusoidal features of t at geometrically spaced frequencies, projected to width H.

    Frequencies run from 1 to ``max_frequency`` radians per unit time; the lowest
    one keeps (sin, cos) injective on [0, 1], the bounded top keeps the map smooth.
    """

    def __init__(self, width: int, max_frequency: float = 32.0):
        super().__init__()
        half = width // 2
        frequencies = torch.exp(torch.linspace(0.0, math.log(max_frequency), half))
        self.register_buffer("frequencies", frequencies)
        self.proj = nn.Sequential(
            nn.Linear(2 * half, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def features(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None].to(self.frequencies.dtype) * self.frequencies[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(t))


class Denoiser(nn.Module):
    """
    Non-autoregressive encoder-decoder estimating z0 from (z_t, x, t).

    Attributes:
        config (ModelConfig): Architecture hyperparameters.
        pad_id (int): Source padding id.
    """

    def __init__(self, config: ModelConfig, source_vocab_size: int, pad_id: int):
        super().__init__()
        self.config = config
        self.pad_id = pad_id
        self.embed_dim = config.embed_dim
        width = config.width

        self.source_embed = nn.Embedding(source_vocab_size, width, padding_idx=pad_id)
        self.source_pos = nn.Embedding(config.max_positions, width)
        self.target_pos = nn.Embedding(config.max_positions, width)
        encoder_layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=config.heads,
            dim_feedforward=config.ffn_width,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            encoder_layer,
            num_layers=config.layers,
            norm=nn.LayerNorm(width),
            enable_nested_tensor=False,
        )
        self.decoder_layers = nn.ModuleList([
            nn.TransformerDecoderLayer(
                d_model=width,
                nhead=config.heads,
                dim_feedforward=config.ffn_width,
                dropout=config.dropout,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(config.layers)
        ])
        self.decoder_norm = nn.LayerNorm(width)
        # z_t and the self-conditioning estimate, concatenated on the feature axis
        self.input_proj = nn.Linear(2 * config.embed_dim, width)
        self.output_proj = nn.Linear(width, config.embed_dim)
        self.time_embed = TimestepEmbedding(width)

        self.length_head = nn.Linear(width, 2 * config.length_offset_k + 1)
        nn.init.zeros_(self.length_head.weight)
        nn.init.zeros_(self.length_head.bias)

    @property
    def length_offset_k(self) -> int:
        return self.config.length_offset_k

    def _positions(self, length: int, device) -> torch.Tensor:
        if length > self.config.max_positions:
            raise DenoiserInputError(
                f"sequence length {length} exceeds max_positions {self.config.max_positions}"
            )
        return torch.arange(length, device=device)

    def encode(self, source: torch.Tensor, source_mask: torch.Tensor) -> torch.Tensor:
        """
        Encode padded source ids.

        Args:
            source: (B, m) ids.
            source_mask: (B, m) True at real tokens.

        Returns:
            (B, m, H) memory.
        """
        if source.numel() == 0 or not bool(source_mask.any(dim=1).all()):
            raise DenoiserInputError("every source must contain at least one token")
        h = self.source_embed(source) + self.source_pos(self._positions(source.shape[1], source.device))
        return self.encoder(h, src_key_padding_mask=~source_mask)

    def _time_tensor(self, t: TimeInput, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise DimensionError(f"t must be a scalar or shape ({batch},), got {tuple(t.shape)}")
        if not bool(((t >= 0) & (t <= 1)).all()):
            raise DenoiserInputError(f"t outside [0, 1]: {t.tolist()[:4]}")
        return t

    def decode(
        self,
        z_t: torch.Tensor,
        memory: torch.Tensor,
        source_mask: torch.Tensor,
        t: TimeInput,
        self_cond: Optional[torch.Tensor] = None,
        target_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Estimate z0 from z_t given encoded source memory.

        Args:
            z_t: (B, n, D) noisy target embeddings.
            memory: (B, m, H) encoder output.
            source_mask: (B, m) True at real source tokens.
            t: Scalar or (B,) timesteps fed to the network.
            self_cond: (B, n, D) previous z0 estimate, zeros when absent.
            target_mask: (B, n) True at real target positions.

        Returns:
            (B, n, D) estimate of z0.
        """
        if z_t.dim() != 3 or z_t.shape[-1] != self.embed_dim:
            raise DimensionError(f"z_t must be (B, n, {self.embed_dim}), got {tuple(z_t.shape)}")
        batch, length, _ = z_t.shape
        if length == 0:
            return z_t.new_zeros(batch, 0, self.embed_dim)
        if not bool(torch.isfinite(z_t).all()):
            raise DenoiserInputError("z_t contains NaN or Inf")
        if self_cond is None:
            self_cond = torch.zeros_like(z_t)
        elif self_cond.shape != z_t.shape:
            raise DimensionError(f"self_cond shape {tuple(self_cond.shape)} != z_t shape {tuple(z_t.shape)}")
        elif not bool(torch.isfinite(self_cond).all()):
            raise DenoiserInputError("self_cond contains NaN or Inf")

        times = self._time_tensor(t, batch, z_t)
        temb = self.time_embed(times)[:, None, :]
        h = self.input_proj(torch.cat([z_t, self_cond], dim=-1))
        h = h + self.target_pos(self._positions(length, z_t.device))
        pad_mask = None if target_mask is None else ~target_mask
        for layer in self.decoder_layers:
            h = layer(
                h + temb,
                memory,
                tgt_key_padding_mask=pad_mask,
                memory_key_padding_mask=~source_mask,
            )
        return self.output_proj(self.decoder_norm(h))

    def length_logits(self, memory: torch.Tensor, source_mask: torch.Tensor) -> torch.Tensor:
        """(B, 2K + 1) logits over length offsets from mean-pooled encoder states."""
        weights = source_mask.to(memory.dtype).unsqueeze(-1)
        pooled = (memory * weights).sum(1) / weights.sum(1).clamp(min=1.0)
        return self.length_head(pooled)

    def forward(
        self,
        z_t: torch.Tensor,
        source: torch.Tensor,
        t: TimeInput,
        self_cond: Optional[torch.Tensor] = None,
        source_mask: Optional[torch.Tensor] = None,
        target_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if source_mask is None:
            source_mask = source != self.pad_id
        memory = self.encode(source, source_mask)
        return self.decode(z_t, memory, source_mask, t, self_cond, target_mask)


def _batched(source: Union[torch.Tensor, Sequence[int]], pad_id: int):
    ids = torch.as_tensor(source, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    return ids, ids != pad_id


def denoise(
    model: ConditionalDenoiser,
    z_t: torch.Tensor,
    source: Union[torch.Tensor, Sequence[int]],
    t: TimeInput,
    self_cond: Optional[torch.Tensor] = None,
    pad_id: Optional[int] = None,
) -> torch.Tensor:
    """
    Single-call denoising; accepts unbatched (n, D) / (m,) inputs.

    Args:
        model: The denoiser.
        z_t: (n, D) or (B, n, D).
        source: (m,) or (B, m) source ids.
        t: Timestep(s).
        self_cond: Optional self-conditioning estimate shaped like z_t.
        pad_id: Source padding id, defaults to the model's.

    Returns:
        z0 estimate shaped like z_t.
    """
    squeeze = z_t.dim() == 2
    if squeeze:
        z_t = z_t.unsqueeze(0)
        if self_cond is not None:
            self_cond = self_cond.unsqueeze(0)
    ids, mask = _batched(source, model.pad_id if pad_id is None else pad_id)
    if ids.shape[0] == 1 and z_t.shape[0] > 1:
        ids, mask = ids.expand(z_t.shape[0], -1), mask.expand(z_t.shape[0], -1)
    memory = model.encode(ids, mask)
    out = model.decode(z_t, memory, mask, t, self_cond)
    return out.squeeze(0) if squeeze else out


def predict_length(
    model: ConditionalDenoiser,
    source: Union[torch.Tensor, Sequence[int]],
    pad_id: Optional[int] = None,
) -> LengthDistribution:
    """
    Distribution over target-length offsets for one source.

    Args:
        model: The denoiser (its length head).
        source: (m,) source ids, non-empty.
        pad_id: Source padding id, defaults to the model's.

    Returns:
        LengthDistribution with normalised log-probabilities over [-K, K].
    """
    ids, mask = _batched(source, model.pad_id if pad_id is None else pad_id)
    with torch.no_grad():
        memory = model.encode(ids, mask)
        log_probs = torch.log_softmax(model.length_logits(memory, mask).double(), dim=-1)[0]
    return LengthDistribution(source_length=int(mask.sum()), log_probs=log_probs)


def time_embedding(model: Denoiser, t: TimeInput) -> torch.Tensor:
    """H-dimensional embedding of a scalar timestep."""
    param = next(model.parameters())
    times = torch.as_tensor(t, dtype=param.dtype).reshape(-1)
    return model.time_embed(times)[0]
