"""End-to-end runs on small trained models. Enabled with --runslow."""

import json
import statistics

import numpy as np
import pytest
import torch

from scripts.pin_regression_constants import pin
from src.analysis.loss_profile import loss_vs_sigma_profile
from src.analysis.nn_recovery import default_sigma_grid, nn_recovery_experiment
from src.analysis.reliance_probe import LARGE_TAU, average_over_t, build_probe_triples, condition_reliance_probe
from src.analysis.schedule_equivalence import schedule_equivalence_check
from src.config import SamplerConfig, SamplerMode, ScheduleKind, load_config
from src.decoding import decode_corpus, initial_noise, sample
from src.denoiser import Denoiser
from src.embedding import EmbeddingTable
from src.experiment_builder import ExperimentBuilder
from src.harness import pipeline
from src.harness.checkpoint import CHECKPOINT_FILE
from src.harness.cli import main
from src.harness.corpus import file_checksum, load_split
from src.harness.manifest import MANIFEST_FILE
from src.samplers import CeDiStepper, DDIMStepper
from src.schedules import NoiseSchedule
from src.utils import pad_sequences
from tests.conftest import ROOT, OracleDenoiser

pytestmark = pytest.mark.slow

LINEAR = NoiseSchedule(ScheduleKind.LINEAR)
SQRT = NoiseSchedule(ScheduleKind.SQRT)
REGRESSION_FILE = ROOT / "tests" / "regression_constants.json"
REGRESSION_STEPS = 8000


def _smoke_config(**overrides):
    values = {"progress": "false"}
    values.update({k: str(v) for k, v in overrides.items()})
    return load_config(ROOT / "configs" / "smoke.cfg", environ={}, overrides=values)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    config = _smoke_config(steps=40)
    pipeline.gen_data(config, root / "data")
    trainer = pipeline.train(config, root / "data", root / "run")
    return root, config, trainer


class TestReproducibility:
    def test_identical_runs_identical_metrics(self, smoke_run):
        root, config, _ = smoke_run
        pipeline.train(config, root / "data", root / "again")
        first = file_checksum(root / "run" / pipeline.METRICS_FILE)
        assert first == file_checksum(root / "again" / pipeline.METRICS_FILE)

    def test_resume_matches_straight_run(self, smoke_run):
        root, _, _ = smoke_run
        pipeline.train(_smoke_config(steps=20), root / "data", root / "half")
        pipeline.train(_smoke_config(steps=40), root / "data", root / "resumed",
                       resume=root / "half" / CHECKPOINT_FILE)
        straight = (root / "run" / pipeline.METRICS_FILE).read_text()
        assert (root / "resumed" / pipeline.METRICS_FILE).read_text() == straight


class TestSamplingSurface:
    def test_candidate_pool(self, smoke_run, tmp_path):
        root, _, _ = smoke_run
        code = main([
            "sample", "--checkpoint", str(root / "run" / CHECKPOINT_FILE), "--data", str(root / "data"),
            "--out", str(tmp_path), "--length-beam", "5", "--mbr", "10", "--steps", "2", "--limit", "3",
            "--log-level", "WARNING",
        ])
        assert code == 0
        records = [json.loads(line) for line in (tmp_path / pipeline.CANDIDATES_FILE).read_text().splitlines()]
        assert len(records) == 3
        for record in records:
            assert len(record["candidates"]) == 50
            assert len(set(record["lengths"])) == 5
            assert record["nfe"] == 2 * 50
            assert 0 <= record["selected"] < 50
        assert len((tmp_path / pipeline.HYPOTHESES_FILE).read_text().splitlines()) == 3

    def test_evaluate_sampled_hypotheses(self, smoke_run, tmp_path, capsys):
        root, _, _ = smoke_run
        out = tmp_path / "decoded"
        args = ["--data", str(root / "data"), "--log-level", "WARNING"]
        assert main(["sample", "--checkpoint", str(root / "run" / CHECKPOINT_FILE), "--out", str(out),
                     "--limit", "5", *args]) == 0
        assert main(["evaluate", "--hyp", str(out / pipeline.HYPOTHESES_FILE), *args]) == 0
        assert "sentences" in capsys.readouterr().out

    def test_analyses_run(self, smoke_run, tmp_path):
        root, _, _ = smoke_run
        ckpt = str(root / "run" / CHECKPOINT_FILE)
        common = ["--checkpoint", ckpt, "--data", str(root / "data"), "--limit", "10", "--log-level", "WARNING"]
        assert main(["analyze", "loss-profile", *common, "--out", str(tmp_path), "--grid-points", "5"]) == 0
        assert main(["analyze", "reliance-probe", *common, "--out", str(tmp_path), "--t-grid", "0.3,0.6,0.9"]) == 0
        assert main(["analyze", "schedule-equiv", *common, "--out", str(tmp_path), "--samples", "500"]) == 0
        assert main(["analyze", "lb-mbr-sweep", *common, "--out", str(tmp_path), "--length-beams", "1,2",
                     "--mbr-sizes", "1,2", "--steps", "2"]) == 0
        for name in ("loss_profile.csv", "sigma_histogram.csv", "reliance_probe.csv",
                     "schedule_equivalence.csv", "lb_mbr_sweep.csv"):
            assert (tmp_path / name).exists()
        manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
        assert manifest["command"] == "analyze lb-mbr-sweep"
        assert manifest["checkpoint"] == ckpt


class TestOracleAtScale:
    @pytest.mark.parametrize("steps", [1, 5, 20])
    def test_thousand_pairs(self, steps):
        gen = torch.Generator().manual_seed(100 + steps)
        table = EmbeddingTable.from_matrix(torch.randn(64, 16, generator=gen, dtype=torch.float64), pad_id=0)
        for trial in range(1000):
            length = int(torch.randint(1, 24, (1,), generator=gen))
            target = torch.randint(1, 64, (length,), generator=gen).tolist()
            oracle = OracleDenoiser(table, target)
            mode = SamplerMode.CEDI if trial % 2 else SamplerMode.DDIM
            schedule = SQRT if trial % 4 >= 2 else LINEAR
            got = sample(oracle, table, [3, 4], length, SamplerConfig(steps=steps, mode=mode), schedule, seed=trial)
            assert list(got) == target

    def test_cedi_reduces_to_ddim(self, tiny_model_config):
        torch.manual_seed(1)
        model = Denoiser(tiny_model_config, source_vocab_size=30, pad_id=0).eval()
        mask = torch.ones(1, 4, dtype=torch.bool)
        memory = model.encode(torch.tensor([[4, 5, 6, 7]]), mask).detach()
        for seed in range(100):
            terminal = 0.05 * (seed % 10)
            z = initial_noise([seed], 6, 8, torch.float32)
            ddim = DDIMStepper(SQRT, steps=10, t_terminal=terminal).run(model, z, memory, mask)
            cedi = CeDiStepper(SQRT, steps=10, t_terminal=terminal, tau_terminal=terminal).run(model, z, memory, mask)
            assert torch.equal(ddim, cedi)


class TestRecoveryCurves:
    @pytest.mark.parametrize("vocab_size", [100, 1000])
    def test_curves(self, vocab_size):
        grid = [0.0] + default_sigma_grid(50)
        at_07 = []
        for dim in (16, 64, 128):
            curve = nn_recovery_experiment(vocab_size, dim, grid, samples_per_sigma=10_000, seed=vocab_size)
            accuracies = np.array([acc for _, acc in curve])
            assert accuracies[0] == 1.0
            assert np.all(np.diff(accuracies) <= 0.02)
            at_07.append(nn_recovery_experiment(vocab_size, dim, [0.7], samples_per_sigma=10_000, seed=1)[0][1])
        assert at_07[0] < at_07[1] < at_07[2]


class TestScheduleEquivalenceAtScale:
    def test_frozen_model(self, smoke_run):
        root, _, _ = smoke_run
        loaded = pipeline.load_model(root / "run" / CHECKPOINT_FILE)
        valid = load_split(root / "data", "valid")
        _, _, gap = schedule_equivalence_check(loaded.model, loaded.table, valid, n_samples=100_000, seed=0,
                                               from_schedule=SQRT, model_schedule=loaded.schedule)
        assert gap < 0.02


class TestRegressionBaselines:
    @pytest.fixture(scope="class")
    def baseline(self, tmp_path_factory):
        return pin(REGRESSION_STEPS, 500, tmp_path_factory.mktemp("pin") / "fresh.json")

    def test_copy_exact_match(self, baseline):
        assert baseline["copy_exact_match_cedi"] >= 0.99

    def test_length_beam_covers_truth(self, baseline):
        assert baseline["copy_length_beam5_coverage"] >= 0.99

    def test_length_mode_at_zero_offset(self, baseline):
        assert baseline["copy_length_mode_zero"] >= 0.95

    def test_denoiser_beats_initialisation(self, baseline):
        assert baseline["denoiser_mse_trained"] * 10 <= baseline["denoiser_mse_untrained"]

    def test_reconstruction_nll_falls(self, baseline):
        blocks = baseline["reconstruction_nll_blocks"]
        assert len(blocks) == 5
        assert all(later <= earlier + 1e-2 for earlier, later in zip(blocks, blocks[1:]))
        assert blocks[-1] < blocks[0]

    def test_matches_pinned_run(self, baseline):
        if not REGRESSION_FILE.exists():
            pytest.skip("run scripts/pin_regression_constants.py to record baselines")
        pinned = json.loads(REGRESSION_FILE.read_text())
        if pinned["train_steps"] != REGRESSION_STEPS:
            pytest.skip(f"pinned run used {pinned['train_steps']} steps")
        assert baseline["config_hash"] == pinned["config_hash"]
        assert baseline["copy_exact_match_cedi"] >= pinned["copy_exact_match_cedi"] - 0.01


def _desk_config(**overrides):
    values = {"progress": "false", "steps": "4000", "n_valid": "200"}
    values.update({k: str(v) for k, v in overrides.items()})
    return load_config(ROOT / "configs" / "desk.cfg", environ={}, overrides=values)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    clipped = _desk_config()
    pipeline.gen_data(clipped, root / "data")
    return {
        "root": root,
        "clipped": pipeline.train(clipped, root / "data", root / "clipped"),
        "unclipped": pipeline.train(_desk_config(noise_clipping="false"), root / "data", root / "unclipped"),
    }


class TestTrainedDenoiser:
    def test_loss_profile_collapses_at_small_sigma(self, desk_runs):
        trainer = desk_runs["unclipped"]
        valid = load_split(desk_runs["root"] / "data", "valid")
        grid = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]
        losses = np.array([loss for _, loss in loss_vs_sigma_profile(
            trainer.model, trainer.table, valid, grid, trainer.schedule, seed=0)])
        assert np.all(np.isfinite(losses))
        assert losses[:4].mean() < 0.25 * losses[4:].mean()
        assert np.polyfit(grid, losses, 1)[0] > 0
        assert losses[-1] > losses[0]

    def test_output_depends_on_timestep(self, desk_runs):
        trainer = desk_runs["clipped"]
        model = trainer.model.eval()
        valid = load_split(desk_runs["root"] / "data", "valid")[:16]
        source, source_mask = pad_sequences([ex.src for ex in valid], trainer.table.pad_id)
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(len(valid), 10, trainer.table.dim, generator=gen)
        with torch.no_grad():
            memory = model.encode(source, source_mask)
            low = model.decode(z, memory, source_mask, 0.3)
            high = model.decode(z, memory, source_mask, 0.99)
        assert float((low - high).abs().mean()) > 1e-3

    def test_large_tau_pulls_towards_source(self, desk_runs):
        trainer = desk_runs["clipped"]
        valid = load_split(desk_runs["root"] / "data", "valid")
        triples = build_probe_triples(valid, seed=0)
        t_grid = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        rows = condition_reliance_probe(trainer.model, trainer.table, triples, t_grid, trainer.schedule, seed=0)
        means = average_over_t(rows, 0.3, 0.9)
        truth_t, negative_t = means["tau=t"]
        truth_large, negative_large = means[f"tau={LARGE_TAU:g}"]
        assert truth_large < truth_t
        assert negative_large > negative_t


class TestAblationOrdering:
    def test_clipping_and_sampler_grid(self, tmp_path):
        config = load_config(ROOT / "configs" / "ablation.cfg", environ={}, overrides={"n_valid": "200"})
        pipeline.gen_data(config, tmp_path / "data")
        report = pipeline.run_ablation(config, [1, 2, 3], tmp_path / "data", tmp_path / "ablation", mbr_sizes=(1,))
        assert report.ordering_checks(1) == {
            "clipped_cedi_ge_ddim": True,
            "unclipped_ddim_worst": True,
            "gap_larger_unclipped": True,
        }
        assert json.loads((tmp_path / "ablation" / MANIFEST_FILE).read_text())["command"] == "ablate"


class TestLanguageAccuracy:
    def test_cedi_writes_the_tagged_language(self, tmp_path):
        base = load_config(ROOT / "configs" / "one_to_many.cfg", environ={},
                           overrides={"progress": "false", "n_valid": "200"})
        pipeline.gen_data(base, tmp_path / "data")
        vocab = pipeline.load_vocab(tmp_path / "data")
        valid = load_split(tmp_path / "data", "valid")
        accuracy = {SamplerMode.DDIM: [], SamplerMode.CEDI: []}
        for seed in (1, 2, 3):
            trained = ExperimentBuilder(base).with_noise_clipping(True).with_seed(seed)
            trainer = pipeline.train(trained.build(), tmp_path / "data", tmp_path / f"seed{seed}")
            for mode in accuracy:
                config = trained.with_mode(mode).build()
                results = decode_corpus(trainer.model, trainer.table, [ex.src for ex in valid],
                                        config.sampler, trainer.schedule)
                evaluation = pipeline.score([r.best.tokens for r in results], valid, vocab)
                accuracy[mode].append(evaluation.language_accuracy)
        gap = statistics.median(accuracy[SamplerMode.CEDI]) - statistics.median(accuracy[SamplerMode.DDIM])
        assert gap >= 0.10
