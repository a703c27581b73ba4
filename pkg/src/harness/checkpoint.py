"""
Versioned training checkpoints.

A checkpoint holds the config snapshot, the vocabulary and the full trainer
state (denoiser, embedding table, optimiser, LR schedule, every RNG stream,
clipping estimate and metrics history). Saving what was loaded reproduces the
file byte for byte.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

import torch

from src.config import ExperimentConfig
from src.denoiser import Denoiser
from src.embedding import EmbeddingTable
from src.entities import Vocabulary
from src.errors import CheckpointFormatError, MissingFileError
from src.schedules import NoiseSchedule

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.pt"


def checkpoint_payload(config: ExperimentConfig, vocab: Vocabulary, trainer_state: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "vocab": vocab.to_dict(),
        "trainer": trainer_state,
    }


def save_checkpoint(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info("saved checkpoint %s (step %s)", path, payload["trainer"].get("step"))
    return path


def load_checkpoint(path: Path) -> Dict[str, Any]:
    """
    Read a checkpoint and check its format version.

    Raises:
        MissingFileError: if the file does not exist.
        CheckpointFormatError: on a version mismatch or a malformed payload.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointFormatError(f"{path} is not a checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path} has format version {payload['format_version']}, expected {FORMAT_VERSION}"
        )
    return payload


@dataclass
class LoadedModel:
    """Everything inference needs from a checkpoint."""
    config: ExperimentConfig
    vocab: Vocabulary
    model: Denoiser
    table: EmbeddingTable
    schedule: NoiseSchedule
    step: int


def restore_model(payload: Dict[str, Any]) -> LoadedModel:
    config = ExperimentConfig.from_dict(payload["config"])
    vocab = Vocabulary.from_dict(payload["vocab"])
    state = payload["trainer"]
    model = Denoiser(config.model, vocab.size, vocab.pad_id)
    model.load_state_dict(state["model"])
    model.eval()
    table = EmbeddingTable.from_matrix(state["table"]["weight"], vocab.pad_id)
    return LoadedModel(
        config=config,
        vocab=vocab,
        model=model,
        table=table,
        schedule=NoiseSchedule(config.train.schedule),
        step=int(state["step"]),
    )
