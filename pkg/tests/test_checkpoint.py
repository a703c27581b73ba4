import pytest
import torch

from src.errors import CheckpointFormatError, MissingFileError
from src.harness.checkpoint import (
    CHECKPOINT_FILE,
    FORMAT_VERSION,
    checkpoint_payload,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from src.training import Trainer


@pytest.fixture
def trained(tiny_experiment, copy_vocab, copy_train):
    trainer = Trainer(tiny_experiment, copy_vocab, copy_train)
    trainer.fit(3)
    return trainer


def _payload(trainer):
    return checkpoint_payload(trainer.config, trainer.vocab, trainer.state_dict())


class TestSaveLoad:
    def test_resave_is_byte_identical(self, trained, tmp_path):
        first = save_checkpoint(tmp_path / "a" / CHECKPOINT_FILE, _payload(trained))
        second = save_checkpoint(tmp_path / "b" / CHECKPOINT_FILE, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_payload_fields(self, trained, tmp_path):
        payload = load_checkpoint(save_checkpoint(tmp_path / CHECKPOINT_FILE, _payload(trained)))
        assert payload["format_version"] == FORMAT_VERSION
        assert payload["trainer"]["step"] == 3
        assert payload["config"] == trained.config.to_dict()
        assert len(payload["trainer"]["history"]) == 3

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_checkpoint(tmp_path / CHECKPOINT_FILE)

    def test_version_mismatch(self, trained, tmp_path):
        payload = _payload(trained)
        payload["format_version"] = FORMAT_VERSION + 1
        path = tmp_path / CHECKPOINT_FILE
        torch.save(payload, path)
        with pytest.raises(CheckpointFormatError, match="format version"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / CHECKPOINT_FILE
        path.write_bytes(b"definitely not a zip archive")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


class TestResume:
    def test_interrupted_run_matches_straight_run(self, tiny_experiment, copy_vocab, copy_train, tmp_path):
        straight = Trainer(tiny_experiment, copy_vocab, copy_train)
        straight.fit(6)

        first_half = Trainer(tiny_experiment, copy_vocab, copy_train)
        first_half.fit(3)
        path = save_checkpoint(tmp_path / CHECKPOINT_FILE, _payload(first_half))

        resumed = Trainer(tiny_experiment, copy_vocab, copy_train)
        resumed.load_state_dict(load_checkpoint(path)["trainer"])
        resumed.fit(6)

        assert resumed.step == 6
        assert resumed.history == straight.history
        for a, b in zip(resumed.model.parameters(), straight.model.parameters()):
            assert torch.equal(a, b)
        assert torch.equal(resumed.table.weight, straight.table.weight)


class TestRestoreModel:
    def test_matches_trainer(self, trained, tmp_path):
        path = save_checkpoint(tmp_path / CHECKPOINT_FILE, _payload(trained))
        loaded = restore_model(load_checkpoint(path))
        assert loaded.step == 3
        assert loaded.config == trained.config
        assert loaded.vocab.tokens == trained.vocab.tokens
        assert loaded.schedule.kind is trained.schedule.kind
        assert not loaded.model.training
        assert torch.equal(loaded.table.weight, trained.table.weight.detach())
        for key, value in trained.model.state_dict().items():
            assert torch.equal(loaded.model.state_dict()[key], value)
