#!/usr/bin/env python3
"""
Train the desk copy-task reference model and pin its baselines.

Writes tests/regression_constants.json with the exact-match rate of CeDi
decoding, the length-head statistics, the denoiser improvement over its
initialisation and the early reconstruction NLL curve. The slow test suite
recomputes these numbers and checks them against fixed thresholds.
"""

import argparse
import json
import statistics
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from src.analysis.loss_profile import loss_vs_sigma_profile  # noqa: E402
from src.config import SamplerMode, TaskKind, load_config  # noqa: E402
from src.decoding import decode_corpus, length_beam  # noqa: E402
from src.harness import pipeline  # noqa: E402
from src.harness.corpus import load_split  # noqa: E402
from src.training import Trainer  # noqa: E402

DEFAULT_STEPS = 20000
DENOISER_T = 0.9
NLL_WINDOW = 1000
NLL_BLOCKS = 5


def nll_block_means(history, window: int = NLL_WINDOW, blocks: int = NLL_BLOCKS):
    """Mean reconstruction NLL over equal blocks of the first ``window`` steps."""
    values = [row["reconstruction_nll"] for row in history[:window]]
    size = len(values) // blocks
    return [statistics.fmean(values[i * size:(i + 1) * size]) for i in range(blocks)]


def pin(steps: int, limit: int, out_path: Path) -> dict:
    config = load_config(ROOT / "configs" / "desk.cfg", environ={}, overrides={
        "task": TaskKind.COPY.value,
        "steps": str(steps),
        "mode": SamplerMode.CEDI.value,
        "progress": "false",
    })
    with tempfile.TemporaryDirectory() as tmp:
        data_dir, run_dir = Path(tmp) / "data", Path(tmp) / "run"
        pipeline.gen_data(config, data_dir)
        untrained = Trainer(config, pipeline.load_vocab(data_dir), load_split(data_dir, "train"))
        trainer = pipeline.train(config, data_dir, run_dir)
        valid = load_split(data_dir, "valid")[:limit]
        results = decode_corpus(trainer.model, trainer.table, [ex.src for ex in valid], config.sampler, trainer.schedule)
        exact = sum(r.best.tokens == ex.tgt for r, ex in zip(results, valid)) / len(valid)
        pad = trainer.vocab.pad_id
        covered = sum(len(ex.tgt) in length_beam(trainer.model, ex.src, 5, pad) for ex in valid) / len(valid)
        mode_zero = sum(length_beam(trainer.model, ex.src, 1, pad)[0] == len(ex.src) for ex in valid) / len(valid)
        sigma = float(trainer.schedule.sigma(DENOISER_T))
        (_, before), = loss_vs_sigma_profile(untrained.model, untrained.table, valid, [sigma], untrained.schedule)
        (_, after), = loss_vs_sigma_profile(trainer.model, trainer.table, valid, [sigma], trainer.schedule)
        nll = nll_block_means(trainer.history)
    constants = {
        "config_hash": config.config_hash(),
        "train_steps": steps,
        "copy_exact_match_cedi": exact,
        "copy_length_beam5_coverage": covered,
        "copy_length_mode_zero": mode_zero,
        "denoiser_mse_untrained": before,
        "denoiser_mse_trained": after,
        "reconstruction_nll_blocks": nll,
        "sigma_min_final": trainer.clipping.sigma_min,
    }
    out_path.write_text(json.dumps(constants, indent=1, sort_keys=True) + "\n")
    return constants


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    parser.add_argument("--limit", type=int, default=500)
    parser.add_argument("--out", type=Path, default=ROOT / "tests" / "regression_constants.json")
    args = parser.parse_args()

    constants = pin(args.steps, args.limit, args.out)
    for key, value in constants.items():
        print(f"{key:<30} {value}")
    print(f"Saved to {args.out}")


if __name__ == "__main__":
    main()
