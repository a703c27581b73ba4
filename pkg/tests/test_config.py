import json

import pytest

from src.config import (
    ExperimentConfig,
    SamplerConfig,
    SamplerMode,
    ScheduleKind,
    TaskKind,
    TrainConfig,
    describe_keys,
    env_overrides,
    load_config,
    parse_config_text,
)
from src.errors import ConfigError, MissingFileError
from tests.conftest import ROOT

ROOT_CONFIGS = ("desk.cfg", "smoke.cfg", "ablation.cfg", "one_to_many.cfg")


class TestParse:
    def test_comments_and_blanks(self):
        text = "# header\n\ntask = copy   # trailing\nsteps=10\n"
        assert parse_config_text(text) == {"task": "copy", "steps": "10"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("steps = 1\nsteps = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("steps 10\n")


class TestOverrides:
    def test_routes_to_sections(self):
        config = ExperimentConfig().with_overrides({
            "task": "reverse", "data_seed": "5", "sample_steps": "7", "mbr": "3",
            "schedule": "SQRT", "noise_clipping": "off", "seed": "9",
        })
        assert config.task.kind is TaskKind.REVERSE
        assert config.task.seed == 5
        assert config.sampler.steps == 7
        assert config.sampler.mbr_samples == 3
        assert config.train.schedule is ScheduleKind.SQRT
        assert config.train.noise_clipping is False
        assert config.seed == 9

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig().with_overrides({"stepz": "1"})

    @pytest.mark.parametrize("key,value", [
        ("steps", "ten"),
        ("noise_clipping", "maybe"),
        ("mode", "beam"),
        ("tau_sigma", "1.5"),
        ("width", "255"),
    ])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides({key: value})

    def test_validation_in_sections(self):
        with pytest.raises(ConfigError):
            TrainConfig(clip_refresh_every=0)
        with pytest.raises(ConfigError):
            SamplerConfig(t_terminal=1.0)


class TestLoad:
    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("steps = 100\nlr = 0.01\nmode = ddim\n")
        environ = {"SEQDIFF_STEPS": "200", "SEQDIFF_MBR": "4", "HOME": "/root"}
        config = load_config(path, environ=environ, overrides={"mbr": "6"})
        assert config.train.steps == 200
        assert config.train.lr == 0.01
        assert config.sampler.mode is SamplerMode.DDIM
        assert config.sampler.mbr_samples == 6

    def test_defaults(self):
        assert load_config(environ={}) == ExperimentConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_config(tmp_path / "absent.cfg", environ={})

    def test_env_prefix(self):
        assert env_overrides({"SEQDIFF_TAU_SIGMA": "0.9", "OTHER": "x"}) == {"tau_sigma": "0.9"}

    @pytest.mark.parametrize("name", ROOT_CONFIGS)
    def test_shipped_configs_parse(self, name):
        load_config(ROOT / "configs" / name, environ={})


class TestSerialization:
    def test_dict_round_trip(self):
        config = ExperimentConfig().with_overrides({"task": "one_to_many", "mode": "ddim", "steps": "12"})
        assert ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config

    def test_hash_stable_and_sensitive(self):
        a = ExperimentConfig()
        assert a.config_hash() == ExperimentConfig().config_hash()
        assert a.config_hash() != a.with_overrides({"sample_seed": "1"}).config_hash()
        assert len(a.config_hash()) == 64

    def test_describe_keys_cover_every_section(self):
        keys = {key for key, _, _ in describe_keys()}
        assert {"seed", "task", "data_seed", "embed_dim", "schedule", "sample_steps", "mbr", "sample_seed"} <= keys
        table = {key: (kind, default) for key, kind, default in describe_keys()}
        assert table["mode"] == ("ddim|cedi", "cedi")
        assert table["tau_sigma"] == ("float", 0.99)
