import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from src.errors import MissingFileError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED_TOKENS = (PAD, BOS, EOS, UNK)


@dataclass
class Vocabulary:
    """
    Ordered symbol inventory shared by sources and targets.

    Attributes:
        tokens (List[str]): Distinct symbols; position is the token id.
        languages (Dict[str, Tuple[int, int]]): Half-open id range per sub-language.
        tags (Dict[int, int]): Language index -> id of its tag token.
    """
    tokens: List[str]
    languages: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    tags: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        for tok in RESERVED_TOKENS:
            if tok not in self._index:
                raise ValueError(f"vocabulary is missing reserved token {tok}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    def language_of(self, token_id: int) -> Optional[str]:
        for name, (lo, hi) in self.languages.items():
            if lo <= token_id < hi:
                return name
        return None

    def to_dict(self) -> Dict[str, object]:
        return {
            "tokens": list(self.tokens),
            "languages": {k: list(v) for k, v in self.languages.items()},
            "tags": {str(k): v for k, v in self.tags.items()},
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        if not Path(path).exists():
            raise MissingFileError(f"vocabulary file not found: {path}")
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "Vocabulary":
        return cls(
            tokens=payload["tokens"],
            languages={k: (v[0], v[1]) for k, v in payload.get("languages", {}).items()},
            tags={int(k): v for k, v in payload.get("tags", {}).items()},
        )


@dataclass(frozen=True)
class Example:
    """
    One source/target pair.

    Attributes:
        src (Tuple[int, ...]): Source token ids.
        tgt (Tuple[int, ...]): Target token ids.
        lang (Optional[int]): Sub-language index for multilingual tasks.
        index (int): Position in its split (stable id for diagnostics and seeds).
    """
    src: Tuple[int, ...]
    tgt: Tuple[int, ...]
    lang: Optional[int] = None
    index: int = 0


@dataclass
class DiffusionBatch:
    """
    A padded training batch and its forward-diffusion draw.

    Attributes:
        source (Tensor): (B, m) source ids, pad-filled.
        source_mask (Tensor): (B, m) True at real source tokens.
        target (Tensor): (B, n) target ids, pad-filled.
        target_mask (Tensor): (B, n) True at real target tokens.
        t (Tensor): (B,) timesteps.
        epsilon (Tensor): (B, n, D) standard-normal noise.
        z0 (Tensor): (B, n, D) clean target embeddings.
        zt (Tensor): (B, n, D) alpha(t) * z0 + sigma(t) * epsilon.
        example_ids (List[int]): Example indices for diagnostics.
    """
    source: torch.Tensor
    source_mask: torch.Tensor
    target: torch.Tensor
    target_mask: torch.Tensor
    t: torch.Tensor
    epsilon: torch.Tensor
    z0: torch.Tensor
    zt: torch.Tensor
    example_ids: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss terms; ``total`` is their sum."""
    diffusion_mse: float
    reconstruction_nll: float
    length_nll: float

    @property
    def total(self) -> float:
        return self.diffusion_mse + self.reconstruction_nll + self.length_nll


@dataclass(frozen=True)
class ClippingEstimate:
    """
    Geometry-derived clipping threshold.

    Attributes:
        delta_sq (float): Dimension-normalised mean nearest-neighbour squared distance.
        sigma_min (float): (1 / delta_sq + 1) ** -0.5, or 0 when delta_sq is 0.
        step_computed (int): Training step the estimate was taken at.
    """
    delta_sq: float
    sigma_min: float
    step_computed: int


@dataclass
class LengthDistribution:
    """
    Distribution over target-length offsets for one source.

    Attributes:
        source_length (int): Non-pad source tokens.
        log_probs (Tensor): (2K + 1,) log-probabilities of offsets -K..K.
    """
    source_length: int
    log_probs: torch.Tensor

    @property
    def k(self) -> int:
        return (self.log_probs.numel() - 1) // 2

    @property
    def offsets(self) -> List[int]:
        return list(range(-self.k, self.k + 1))

    def length_for(self, offset: int) -> int:
        return max(1, self.source_length + offset)

    def top_lengths(self, beam: int, max_length: Optional[int] = None) -> List[Tuple[int, float]]:
        """
        Most probable distinct lengths, best first.

        Offsets that floor (or cap) to an already chosen length are skipped, so
        fewer than ``beam`` lengths come back only when the distinct lengths run out.
        """
        scores = self.log_probs.tolist()
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        chosen: List[Tuple[int, float]] = []
        seen = set()
        for i in order:
            length = self.length_for(i - self.k)
            if max_length is not None:
                length = min(length, max_length)
            if length in seen:
                continue
            seen.add(length)
            chosen.append((length, scores[i]))
            if len(chosen) == beam:
                break
        return chosen


@dataclass(frozen=True)
class Candidate:
    """One decoded hypothesis."""
    tokens: Tuple[int, ...]
    length: int
    sample_index: int
    length_log_prob: float = 0.0


@dataclass
class CandidateSet:
    """
    Pooled LB x MBR hypotheses for one source.

    Attributes:
        candidates (List[Candidate]): All decoded hypotheses.
        utility_matrix (List[List[float]]): Pairwise utilities (row i scored against column j).
        selected (int): Index of the chosen candidate.
        nfe (int): Denoiser function evaluations spent.
    """
    candidates: List[Candidate]
    utility_matrix: List[List[float]] = field(default_factory=list)
    selected: int = 0
    nfe: int = 0

    @property
    def best(self) -> Candidate:
        return self.candidates[self.selected]
