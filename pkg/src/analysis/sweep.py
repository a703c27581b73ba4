"""Validation BLEU over a grid of length-beam and MBR sizes."""

import logging
from dataclasses import replace
from typing import List, Sequence, Tuple

from src.analysis.bleu import corpus_bleu
from src.config import SamplerConfig
from src.decoding import decode_corpus
from src.denoiser import ConditionalDenoiser
from src.embedding import EmbeddingTable
from src.entities import Example
from src.schedules import NoiseSchedule

logger = logging.getLogger(__name__)


def lb_mbr_sweep(
    model: ConditionalDenoiser,
    table: EmbeddingTable,
    examples: Sequence[Example],
    length_beams: Sequence[int],
    mbr_sizes: Sequence[int],
    config: SamplerConfig,
    schedule: NoiseSchedule,
    progress: bool = False,
) -> List[Tuple[int, int, int, float]]:
    """
    Decode the examples for every (LB, MBR) pair.

    Returns:
        Rows (length_beam, mbr, nfe per sentence, BLEU).
    """
    references = [ex.tgt for ex in examples]
    rows = []
    for beam in length_beams:
        for mbr in mbr_sizes:
            cfg = replace(config, length_beam=beam, mbr_samples=mbr)
            results = decode_corpus(model, table, [ex.src for ex in examples], cfg, schedule, progress=progress)
            bleu = corpus_bleu([r.best.tokens for r in results], references)
            rows.append((beam, mbr, cfg.steps * beam * mbr, bleu))
            logger.info("LB=%d MBR=%d BLEU=%.2f", beam, mbr, bleu)
    return rows
