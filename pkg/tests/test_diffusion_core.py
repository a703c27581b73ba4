import logging
import math

import numpy as np
import pytest
import torch
from torch import nn

from src.config import ModelConfig, ScheduleKind
from src.denoiser import Denoiser
from src.diffusion_core import (
    assemble_batch,
    compute_losses,
    diffusion_loss,
    forward_diffuse,
    length_targets,
    reconstruction_loss,
    self_cond_rows,
    train_step,
)
from src.embedding import EmbeddingTable
from src.entities import Example
from src.errors import DimensionError, NonFiniteLossError, UndefinedStatisticError
from src.schedules import NoiseSchedule
from src.training import Trainer

LINEAR = NoiseSchedule(ScheduleKind.LINEAR)
SQRT = NoiseSchedule(ScheduleKind.SQRT)


class ToyDenoiser(nn.Module):
    """Ten parameters: per-dimension scale and shift, a time and a source coefficient."""

    def __init__(self, dim: int = 4, k: int = 2):
        super().__init__()
        gen = torch.Generator().manual_seed(0)
        self.embed_dim = dim
        self.k = k
        self.scale = nn.Parameter(torch.randn(dim, generator=gen, dtype=torch.float64))
        self.shift = nn.Parameter(torch.randn(dim, generator=gen, dtype=torch.float64))
        self.time_coef = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))
        self.source_coef = nn.Parameter(torch.tensor(-0.2, dtype=torch.float64))

    def encode(self, source, source_mask):
        return (source.to(torch.float64) * source_mask).unsqueeze(-1) * 0.1

    def _pooled(self, memory):
        return memory.mean(dim=(1, 2))

    def decode(self, z_t, memory, source_mask, t, self_cond=None, target_mask=None):
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1, 1, 1)
        pooled = self._pooled(memory)[:, None, None]
        return self.scale * z_t + self.shift + self.time_coef * t + self.source_coef * pooled

    def length_logits(self, memory, source_mask):
        classes = torch.arange(2 * self.k + 1, dtype=torch.float64)
        return self.source_coef * self._pooled(memory)[:, None] * classes


def _examples():
    return [
        Example(src=(1, 2, 3), tgt=(2, 3, 4), index=0),
        Example(src=(4, 5), tgt=(5, 1, 2), index=1),
    ]


def _table(dim=4, vocab=6, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return EmbeddingTable.from_matrix(torch.randn(vocab, dim, generator=gen, dtype=torch.float64), pad_id=0)


def _fixed_draws(examples, dim, seed=2):
    gen = torch.Generator().manual_seed(seed)
    width = max(len(ex.tgt) for ex in examples)
    t = torch.tensor([0.35, 0.8], dtype=torch.float64)
    eps = torch.randn(len(examples), width, dim, generator=gen, dtype=torch.float64)
    return t, eps


def _check_gradients(model, table, examples, params, schedule=SQRT, entries=None):
    t, eps = _fixed_draws(examples, table.dim)

    def total():
        batch = assemble_batch(examples, table, schedule, t, epsilon=eps)
        return compute_losses(model, table, batch, use_self_cond=False, length_weight=0.1)[0]

    model.zero_grad()
    table.zero_grad()
    total().backward()
    analytic, numeric = [], []
    h = 1e-6
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in (range(flat.numel()) if entries is None else range(min(entries, flat.numel()))):
            original = flat[i].item()
            flat[i] = original + h
            plus = total().item()
            flat[i] = original - h
            minus = total().item()
            flat[i] = original
            analytic.append(grad[i].item())
            numeric.append((plus - minus) / (2 * h))
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


class TestForwardDiffuse:
    def test_endpoints(self):
        z0 = torch.randn(2, 3, 4, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, dtype=torch.float64)
        assert torch.equal(forward_diffuse(z0, torch.zeros(2, dtype=torch.float64), eps, LINEAR), z0)
        assert torch.equal(forward_diffuse(z0, torch.ones(2, dtype=torch.float64), eps, SQRT), eps)

    def test_half_noise(self):
        eps = torch.randn(1, 5, 4, dtype=torch.float64)
        out = forward_diffuse(torch.zeros_like(eps), torch.tensor([0.5], dtype=torch.float64), eps, LINEAR)
        torch.testing.assert_close(out, 0.5 * eps)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward_diffuse(torch.zeros(2, 3, 4), torch.zeros(2), torch.zeros(2, 3, 5), LINEAR)

    def test_per_example_timesteps(self):
        z0 = torch.ones(2, 1, 1, dtype=torch.float64)
        out = forward_diffuse(z0, torch.tensor([0.0, 0.6], dtype=torch.float64), torch.zeros_like(z0), LINEAR)
        assert out.flatten().tolist() == pytest.approx([1.0, 0.8])

    @pytest.mark.parametrize("schedule,t", [(LINEAR, 0.3), (SQRT, 0.6)])
    def test_moments(self, schedule, t):
        n = 100_000
        z0 = torch.tensor([[[1.5, -0.5, 0.0, 2.0]]], dtype=torch.float64).expand(n, 1, 4)
        eps = torch.randn(n, 1, 4, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        out = forward_diffuse(z0, torch.full((n,), t, dtype=torch.float64), eps, schedule)
        alpha, sigma = float(schedule.alpha(t)), float(schedule.sigma(t))
        standard_error = sigma / math.sqrt(n)
        np.testing.assert_allclose(out.mean(0)[0].numpy(), alpha * z0[0, 0].numpy(), atol=5 * standard_error)
        np.testing.assert_allclose(out.var(0)[0].numpy(), sigma ** 2, rtol=0.02)


class TestDiffusionLoss:
    def test_perfect(self):
        z0 = torch.randn(2, 3, 4)
        assert float(diffusion_loss(z0, z0, torch.ones(2, 3, dtype=torch.bool))) == 0.0

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_constant_offset(self, c):
        z0 = torch.randn(2, 3, 4, dtype=torch.float64)
        loss = diffusion_loss(z0 + c, z0, torch.ones(2, 3, dtype=torch.bool))
        assert float(loss) == pytest.approx(c * c * 4)

    def test_mask_ignores_padding(self):
        z0 = torch.zeros(1, 3, 2, dtype=torch.float64)
        z_hat = z0.clone()
        z_hat[0, 2] = 100.0
        mask = torch.tensor([[True, True, False]])
        assert float(diffusion_loss(z_hat, z0, mask)) == 0.0

    def test_all_masked(self):
        with pytest.raises(UndefinedStatisticError):
            diffusion_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.bool))


class TestReconstructionLoss:
    def test_single_token_vocabulary(self):
        table = EmbeddingTable.from_matrix(torch.tensor([[9.0, 9.0], [1.0, 0.0]], dtype=torch.float64), pad_id=0)
        target = torch.tensor([[1, 1]])
        z0 = table.weight[target]
        loss = reconstruction_loss(z0, target, table, torch.ones(1, 2, dtype=torch.bool))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        matrix = torch.cat([torch.full((1, 3), 7.0), torch.ones(4, 3)]).double()
        table = EmbeddingTable.from_matrix(matrix, pad_id=0)
        target = torch.tensor([[1, 2, 3]])
        z0 = table.weight[target]
        loss = reconstruction_loss(z0, target, table, torch.ones(1, 3, dtype=torch.bool))
        assert float(loss) == pytest.approx(math.log(4))

    def test_pad_positions_ignored(self):
        table = _table()
        target = torch.tensor([[2, 0]])
        z0 = table.weight[target]
        loss = reconstruction_loss(z0, target, table, torch.tensor([[True, False]]))
        assert math.isfinite(float(loss))


class TestLengthTargets:
    def test_offsets_clamped(self):
        smask = torch.tensor([[True, True, False, False], [True, True, True, True]])
        tmask = torch.tensor([[True, True, True, True], [True, False, False, False]])
        assert length_targets(smask, tmask, k=1).tolist() == [2, 0]


class TestAssembleBatch:
    def test_padding_and_ids(self):
        table = _table()
        batch = assemble_batch(_examples(), table, LINEAR, torch.tensor([0.1, 0.2]), generator=torch.Generator().manual_seed(0))
        assert batch.source.shape == (2, 3)
        assert batch.source_mask.tolist() == [[True, True, True], [True, True, False]]
        assert batch.example_ids == [0, 1]
        assert batch.zt.shape == (2, 3, 4)

    def test_noise_from_generator(self):
        table = _table()
        draw = lambda: assemble_batch(  # noqa: E731
            _examples(), table, LINEAR, torch.tensor([0.5, 0.5]), generator=torch.Generator().manual_seed(4),
        ).epsilon
        assert torch.equal(draw(), draw())

    def test_empty(self):
        with pytest.raises(UndefinedStatisticError):
            assemble_batch([], _table(), LINEAR, torch.zeros(0))


class TestGradients:
    def test_toy_denoiser(self):
        model, table = ToyDenoiser(), _table()
        assert sum(p.numel() for p in model.parameters()) == 10
        _check_gradients(model, table, _examples(), list(model.parameters()) + [table.weight])

    def test_miniature_denoiser(self):
        config = ModelConfig(
            embed_dim=4, layers=1, width=8, heads=2, ffn_width=16,
            length_offset_k=2, dropout=0.0, max_positions=8,
        )
        torch.manual_seed(0)
        model = Denoiser(config, source_vocab_size=6, pad_id=0).double()
        model.train()
        table = _table()
        params = [
            model.input_proj.weight,
            model.output_proj.bias,
            model.time_embed.proj[0].weight,
            model.decoder_layers[0].linear1.weight,
            model.encoder.layers[0].self_attn.in_proj_weight,
            model.length_head.bias,
            table.weight,
        ]
        _check_gradients(model, table, _examples(), params, entries=6)


class TestTrainStep:
    def _batch(self, table, t=(0.5, 0.7)):
        return assemble_batch(_examples(), table, LINEAR, torch.tensor(t, dtype=torch.float64),
                              generator=torch.Generator().manual_seed(0))

    def test_updates_parameters(self):
        model, table = ToyDenoiser(), _table()
        before = model.scale.detach().clone()
        optimizer = torch.optim.AdamW(list(model.parameters()) + list(table.parameters()), lr=1e-2)
        breakdown = train_step(model, table, optimizer, self._batch(table), LINEAR, step=0)
        assert not torch.equal(before, model.scale.detach())
        assert breakdown.total == pytest.approx(
            breakdown.diffusion_mse + breakdown.reconstruction_nll + breakdown.length_nll
        )

    def test_non_finite_loss(self):
        model, table = ToyDenoiser(), _table()
        with torch.no_grad():
            model.shift[0] = float("nan")
        before = model.scale.detach().clone()
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2)
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, table, optimizer, self._batch(table), LINEAR, step=17)
        err = info.value
        assert err.step == 17
        assert err.timesteps == pytest.approx([0.5, 0.7])
        assert err.sigmas == pytest.approx([0.5, 0.7])
        assert err.example_ids == [0, 1]
        assert err.exit_code == 6
        assert torch.equal(before, model.scale.detach())

    def test_clipping_bound_enforced(self):
        model, table = ToyDenoiser(), _table()
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2)
        with pytest.raises(AssertionError):
            train_step(model, table, optimizer, self._batch(table), LINEAR, step=0, sigma_min=0.9)

    def test_self_conditioning_pass(self):
        model, table = ToyDenoiser(), _table()
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2)
        breakdown = train_step(model, table, optimizer, self._batch(table), LINEAR, step=0, use_self_cond=True)
        assert math.isfinite(breakdown.total)

    def test_non_finite_embedding_rows(self):
        model, table = ToyDenoiser(), _table()
        optimizer = torch.optim.SGD(table.parameters(), lr=float("inf"))
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, table, optimizer, self._batch(table), LINEAR, step=9)
        assert info.value.step == 9
        assert "embedding rows" in str(info.value)

    def test_non_finite_parameters(self):
        model, table = ToyDenoiser(), _table()
        optimizer = torch.optim.SGD([model.scale], lr=float("inf"))
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, table, optimizer, self._batch(table), LINEAR, step=3)
        assert "scale" in str(info.value)


class RecordingDenoiser(ToyDenoiser):
    def __init__(self):
        super().__init__()
        self.self_conds = []

    def decode(self, z_t, memory, source_mask, t, self_cond=None, target_mask=None):
        self.self_conds.append(None if self_cond is None else self_cond.detach().clone())
        return super().decode(z_t, memory, source_mask, t, self_cond, target_mask)


class TestSelfConditioning:
    def _batch(self, table):
        return assemble_batch(_examples(), table, LINEAR, torch.tensor([0.5, 0.7], dtype=torch.float64),
                              generator=torch.Generator().manual_seed(0))

    def test_per_row_mask(self):
        model, table = RecordingDenoiser(), _table()
        compute_losses(model, table, self._batch(table), use_self_cond=torch.tensor([True, False]))
        first, second = model.self_conds
        assert first is None
        assert float(second[0].abs().sum()) > 0
        assert torch.equal(second[1], torch.zeros_like(second[1]))

    def test_no_rows_skips_first_pass(self):
        model, table = RecordingDenoiser(), _table()
        compute_losses(model, table, self._batch(table), use_self_cond=torch.tensor([False, False]))
        assert model.self_conds == [None]

    def test_bool_covers_batch(self):
        assert self_cond_rows(True, 3).tolist() == [True, True, True]
        assert self_cond_rows(False, 2).tolist() == [False, False]

    def test_mask_shape_checked(self):
        with pytest.raises(DimensionError):
            self_cond_rows(torch.tensor([True, False, True]), 2)


class TestTrainerDeterminism:
    def test_same_seed_same_history(self, tiny_experiment, copy_vocab, copy_train):
        runs = []
        for _ in range(2):
            trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
            trainer.fit(4)
            runs.append(trainer.history)
        assert runs[0] == runs[1]

    def test_clipped_timesteps_clear_sigma_min(self, tiny_experiment, copy_vocab, copy_train):
        trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
        trainer.fit(3)
        for row in trainer.history:
            assert row["t_min"] == pytest.approx(row["sigma_min"])
        assert trainer.clipping_trace[0].step_computed == 0
        assert [c.step_computed for c in trainer.clipping_trace] == [0, 2]

    def test_unclipped_keeps_full_range(self, tiny_experiment, copy_vocab, copy_train):
        config = tiny_experiment.with_overrides({"noise_clipping": "false"})
        trainer = Trainer(config, copy_vocab, copy_train)
        trainer.fit(2)
        assert all(row["t_min"] == 0.0 for row in trainer.history)
        assert all(row["sigma_min"] > 0.0 for row in trainer.history)

    def test_hundred_steps_identical(self, tiny_experiment, copy_vocab, copy_train):
        runs = []
        for _ in range(2):
            trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
            trainer.fit(100)
            runs.append((trainer.history, trainer.table.weight.detach().clone()))
        assert len(runs[0][0]) == 100
        assert runs[0][0] == runs[1][0]
        assert torch.equal(runs[0][1], runs[1][1])


class TestTrainerChecks:
    def test_self_cond_coins_per_row(self, tiny_experiment, copy_vocab, copy_train):
        trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
        masks = torch.stack([trainer.self_cond_mask(50) for _ in range(200)])
        assert masks.shape == (200, 50)
        assert float(masks.double().mean()) == pytest.approx(0.5, abs=0.02)
        mixed = (masks.any(dim=1) & ~masks.all(dim=1)).double().mean()
        assert float(mixed) > 0.99

    def test_duplicate_rows_warned(self, tiny_experiment, copy_vocab, copy_train, caplog):
        trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
        with torch.no_grad():
            trainer.table.weight[5] = trainer.table.weight[6]
        with caplog.at_level(logging.WARNING, logger="src.training"):
            trainer.fit(2)
        assert any("duplicate" in r.getMessage() for r in caplog.records if r.levelno == logging.WARNING)

    def test_distinct_rows_not_warned(self, tiny_experiment, copy_vocab, copy_train, caplog):
        trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
        with caplog.at_level(logging.WARNING, logger="src.training"):
            trainer.fit(2)
        assert trainer.check_duplicates() == 0
        assert not any("duplicate" in r.getMessage() for r in caplog.records)
