import hashlib
from typing import Iterator, Optional, Sequence, Tuple

import torch


def derive_seed(base: int, *parts: int) -> int:
    """
    Derive an independent 63-bit seed from a base seed and integer coordinates.

    Used wherever one seed has to fan out (workers, epochs, grid points,
    (sequence, beam, sample) triples) without the streams overlapping.

    Args:
        base (int): Base seed.
        *parts (int): Coordinates identifying the derived stream.

    Returns:
        int: Seed in [0, 2**63).
    """
    text = ":".join(str(int(p)) for p in (base, *parts))
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, device: str = "cpu") -> torch.Generator:
    """Return a torch.Generator seeded with ``seed``."""
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen


def chunk_ranges(total: int, chunk: int) -> Iterator[Tuple[int, int]]:
    """Yield [start, stop) windows covering range(total)."""
    for start in range(0, total, chunk):
        yield start, min(start + chunk, total)


def pad_sequences(
    sequences: Sequence[Sequence[int]],
    pad_id: int,
    length: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Right-pad integer sequences into a (B, L) tensor.

    Args:
        sequences: Token id sequences.
        pad_id: Fill value.
        length: Target width (defaults to the longest sequence).

    Returns:
        (ids, mask): long ids and a boolean mask that is True at real tokens.
    """
    width = length if length is not None else max((len(s) for s in sequences), default=0)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        n = min(len(seq), width)
        if n:
            ids[row, :n] = torch.as_tensor(list(seq[:n]), dtype=torch.long)
            mask[row, :n] = True
    return ids, mask
