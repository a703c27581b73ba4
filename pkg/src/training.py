"""
Training loop: token-budget batching, noise clipping refresh, and resumable state.

Everything random is owned by a named stream derived from the experiment seed,
so a run restored from a checkpoint continues bit-identically:

- batch order: random.Random per epoch (pure function of seed and epoch)
- timesteps: the ClippedTimeSampler generator
- forward-diffusion noise and per-row self-conditioning coins: their own torch.Generators
- dropout: the torch global RNG, saved with the checkpoint
"""

import csv
import logging
import random
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch
from tqdm import tqdm

from src.config import ExperimentConfig
from src.denoiser import Denoiser
from src.diffusion_core import assemble_batch, train_step
from src.embedding import EmbeddingTable, duplicate_rows, refresh_clipping
from src.entities import ClippingEstimate, Example, LossBreakdown, Vocabulary
from src.errors import EmptyCorpusError
from src.schedules import ClippedTimeSampler, NoiseSchedule
from src.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "diffusion_mse", "reconstruction_nll", "length_nll", "sigma_min", "t_min")

# Stream ids under the experiment seed.
_INIT_STREAM, _TIME_STREAM, _NOISE_STREAM, _COIN_STREAM, _BATCH_STREAM, _TABLE_STREAM = range(6)


class TokenBatcher:
    """
    Groups examples into batches of at most ``max_tokens`` padded tokens.

    A batch of B examples costs B * max(len(src), len(tgt)). Epoch e is a
    fixed shuffle seeded by (seed, e), so the batch at any global step is a
    pure function of the seed.
    """

    def __init__(self, examples: Sequence[Example], max_tokens: int, seed: int):
        if not examples:
            raise EmptyCorpusError("training split is empty")
        self.examples = list(examples)
        self.max_tokens = max_tokens
        self.seed = seed
        self._epoch_batches: Dict[int, List[List[Example]]] = {}

    def epoch_batches(self, epoch: int) -> List[List[Example]]:
        if epoch not in self._epoch_batches:
            order = list(range(len(self.examples)))
            random.Random(derive_seed(self.seed, epoch)).shuffle(order)
            batches: List[List[Example]] = []
            current: List[Example] = []
            width = 0
            for i in order:
                ex = self.examples[i]
                size = max(len(ex.src), len(ex.tgt))
                new_width = max(width, size)
                if current and new_width * (len(current) + 1) > self.max_tokens:
                    batches.append(current)
                    current, new_width = [], size
                current.append(ex)
                width = new_width
            if current:
                batches.append(current)
            # keep only the latest epoch
            self._epoch_batches = {epoch: batches}
        return self._epoch_batches[epoch]

    def batch_for_step(self, step: int) -> List[Example]:
        """Batch consumed at global step ``step`` (0-based)."""
        epoch = 0
        while True:
            batches = self.epoch_batches(epoch)
            if step < len(batches):
                return batches[step]
            step -= len(batches)
            epoch += 1


def _warmup(warmup_steps: int) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, (step + 1) / warmup_steps)
    return factor


class Trainer:
    """
    Owns the model, the embedding table, the optimiser, and every RNG stream.

    Attributes:
        step (int): Number of completed updates.
        clipping (ClippingEstimate): Latest clipping estimate.
        clipping_trace (List[ClippingEstimate]): Every recomputed estimate.
        history (List[Dict]): One metrics row per step.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        vocab: Vocabulary,
        train_examples: Sequence[Example],
    ):
        self.config = config
        self.vocab = vocab
        seed = config.seed
        torch.manual_seed(derive_seed(seed, _INIT_STREAM))

        self.model = Denoiser(config.model, vocab.size, vocab.pad_id)
        self.table = EmbeddingTable(
            vocab.size,
            config.model.embed_dim,
            vocab.pad_id,
            generator=make_generator(derive_seed(seed, _TABLE_STREAM)),
        )
        self.schedule = NoiseSchedule(config.train.schedule)
        self.time_sampler = ClippedTimeSampler(self.schedule, derive_seed(seed, _TIME_STREAM))
        self.noise_generator = make_generator(derive_seed(seed, _NOISE_STREAM))
        self.coin_generator = make_generator(derive_seed(seed, _COIN_STREAM))
        self.batcher = TokenBatcher(train_examples, config.train.max_tokens, derive_seed(seed, _BATCH_STREAM))

        self.optimizer = torch.optim.AdamW(
            list(self.model.parameters()) + list(self.table.parameters()),
            lr=config.train.lr,
            weight_decay=config.train.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _warmup(config.train.warmup_steps))

        self.step = 0
        self.clipping: Optional[ClippingEstimate] = None
        self.clipping_trace: List[ClippingEstimate] = []
        self.history: List[Dict[str, float]] = []

    def _refresh(self) -> None:
        train = self.config.train
        estimate = refresh_clipping(
            self.table,
            self.schedule,
            self.time_sampler,
            self.step,
            train.clip_refresh_every,
            cached=self.clipping,
            apply=train.noise_clipping,
        )
        if estimate is not self.clipping:
            self.clipping_trace.append(estimate)
            self.check_duplicates()
        self.clipping = estimate

    def check_duplicates(self) -> int:
        """Count non-pad embedding rows that coincide with another row; warns when any do."""
        count = duplicate_rows(self.table)
        if count:
            logger.warning("%d embedding rows duplicate another row exactly at step %d", count, self.step)
        return count

    def self_cond_mask(self, batch_size: int) -> torch.Tensor:
        """(B,) coin flips, True where the row gets a self-conditioning estimate."""
        coins = torch.rand(batch_size, generator=self.coin_generator, dtype=torch.float64)
        return coins < self.config.train.self_cond_prob

    def train_one(self) -> LossBreakdown:
        """Run one update and append its metrics row."""
        train = self.config.train
        self.model.train()
        self._refresh()
        examples = self.batcher.batch_for_step(self.step)
        t = self.time_sampler.sample(len(examples))
        use_self_cond = self.self_cond_mask(len(examples))
        batch = assemble_batch(
            examples,
            self.table,
            self.schedule,
            t.to(self.table.weight.dtype),
            generator=self.noise_generator,
        )
        breakdown = train_step(
            self.model,
            self.table,
            self.optimizer,
            batch,
            self.schedule,
            self.step,
            use_self_cond=use_self_cond,
            length_weight=train.length_loss_weight,
            grad_clip=train.grad_clip,
            sigma_min=self.clipping.sigma_min if train.noise_clipping else None,
        )
        self.scheduler.step()
        self.history.append({
            "step": self.step,
            "diffusion_mse": breakdown.diffusion_mse,
            "reconstruction_nll": breakdown.reconstruction_nll,
            "length_nll": breakdown.length_nll,
            "sigma_min": self.clipping.sigma_min,
            "t_min": self.time_sampler.t_min,
        })
        self.step += 1
        return breakdown

    def fit(
        self,
        steps: Optional[int] = None,
        on_checkpoint: Optional[Callable[["Trainer"], None]] = None,
    ) -> List[Dict[str, float]]:
        """
        Train until ``steps`` total updates (defaults to the configured count).

        Args:
            steps: Absolute step to stop at.
            on_checkpoint: Called every ``save_every`` steps and at the end.

        Returns:
            The metrics history.
        """
        train = self.config.train
        target = train.steps if steps is None else steps
        bar = tqdm(total=target, initial=self.step, disable=not train.progress, desc="train")
        try:
            while self.step < target:
                breakdown = self.train_one()
                bar.update(1)
                bar.set_postfix(mse=f"{breakdown.diffusion_mse:.3f}", rec=f"{breakdown.reconstruction_nll:.3f}")
                if on_checkpoint is not None and train.save_every and self.step % train.save_every == 0:
                    on_checkpoint(self)
        finally:
            bar.close()
        if on_checkpoint is not None and (not train.save_every or self.step % train.save_every != 0):
            on_checkpoint(self)
        self.check_duplicates()
        logger.info("trained to step %d", self.step)
        return self.history

    def write_metrics(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(self.history)

    def state_dict(self) -> Dict[str, object]:
        return {
            "step": self.step,
            "model": self.model.state_dict(),
            "table": self.table.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "time_sampler": self.time_sampler.get_state(),
            "noise_generator": self.noise_generator.get_state(),
            "coin_generator": self.coin_generator.get_state(),
            "torch_rng": torch.get_rng_state(),
            "clipping": None if self.clipping is None else asdict(self.clipping),
            "clipping_trace": [asdict(c) for c in self.clipping_trace],
            "history": list(self.history),
        }

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.step = int(state["step"])
        self.model.load_state_dict(state["model"])
        self.table.load_state_dict(state["table"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.time_sampler.set_state(state["time_sampler"])
        self.noise_generator.set_state(state["noise_generator"])
        self.coin_generator.set_state(state["coin_generator"])
        torch.set_rng_state(state["torch_rng"])
        self.clipping = None if state["clipping"] is None else ClippingEstimate(**state["clipping"])
        self.clipping_trace = [ClippingEstimate(**c) for c in state["clipping_trace"]]
        self.history = list(state["history"])


def run_training(
    config: ExperimentConfig,
    vocab: Vocabulary,
    train_examples: Sequence[Example],
    steps: Optional[int] = None,
    on_checkpoint: Optional[Callable[[Trainer], None]] = None,
    resume_state: Optional[Dict[str, object]] = None,
) -> Trainer:
    """Build a Trainer, optionally restore it, and train."""
    trainer = Trainer(config, vocab, train_examples)
    if resume_state is not None:
        trainer.load_state_dict(resume_state)
        logger.info("resumed at step %d", trainer.step)
    trainer.fit(steps, on_checkpoint)
    return trainer
