import sys
from pathlib import Path
from typing import List, Sequence

import pytest
import torch

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from src.config import ExperimentConfig, ModelConfig, TaskKind, TaskSpec, TrainConfig  # noqa: E402
from src.embedding import EmbeddingTable  # noqa: E402
from src.entities import Example, Vocabulary  # noqa: E402
from src.harness.tasks import build_corpus  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests that train desk models")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model; needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


class OracleDenoiser:
    """
    Returns the true clean embeddings of a fixed target whatever it is shown.

    Target ids are cycled when asked for a different length. The length head
    puts all its mass on the true offset.
    """

    def __init__(self, table: EmbeddingTable, target: Sequence[int], k: int = 8):
        self.table = table
        self.target = list(target)
        self.k = k
        self.embed_dim = table.dim
        self.pad_id = table.pad_id
        self.decode_times: List[float] = []

    def encode(self, source: torch.Tensor, source_mask: torch.Tensor) -> torch.Tensor:
        return torch.zeros(source.shape[0], source.shape[1], 1, dtype=self.table.weight.dtype)

    def decode(self, z_t, memory, source_mask, t, self_cond=None, target_mask=None):
        batch, length, _ = z_t.shape
        ids = torch.tensor([self.target[i % len(self.target)] for i in range(length)], dtype=torch.long)
        self.decode_times.append(float(torch.as_tensor(t).reshape(-1)[0]))
        rows = self.table.weight.detach()[ids].to(z_t.dtype)
        return rows.unsqueeze(0).expand(batch, -1, -1).clone()

    def length_logits(self, memory, source_mask):
        batch = source_mask.shape[0]
        logits = torch.zeros(batch, 2 * self.k + 1, dtype=torch.float64)
        offsets = (len(self.target) - source_mask.sum(1)).clamp(-self.k, self.k) + self.k
        logits[torch.arange(batch), offsets] = 10.0
        return logits


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=8,
        layers=1,
        width=32,
        heads=2,
        ffn_width=64,
        length_offset_k=8,
        dropout=0.0,
        max_positions=64,
    )


@pytest.fixture
def copy_spec() -> TaskSpec:
    return TaskSpec(kind=TaskKind.COPY, vocab_size=12, min_len=3, max_len=6, n_train=40, n_valid=8, n_test=8, seed=7)


@pytest.fixture
def copy_corpus(copy_spec):
    return build_corpus(copy_spec)


@pytest.fixture
def copy_vocab(copy_corpus) -> Vocabulary:
    return copy_corpus.vocab


@pytest.fixture
def copy_train(copy_corpus) -> List[Example]:
    return copy_corpus.splits["train"]


@pytest.fixture
def random_table() -> EmbeddingTable:
    gen = torch.Generator().manual_seed(0)
    return EmbeddingTable(20, 8, pad_id=0, weight=torch.randn(20, 8, generator=gen, dtype=torch.float64))


@pytest.fixture
def tiny_experiment(tiny_model_config, copy_spec) -> ExperimentConfig:
    return ExperimentConfig(
        task=copy_spec,
        model=tiny_model_config,
        train=TrainConfig(
            steps=6,
            max_tokens=32,
            warmup_steps=2,
            clip_refresh_every=2,
            save_every=0,
            progress=False,
        ),
        seed=3,
    )
