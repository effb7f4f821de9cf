import pytest

from detadapt.config import DEFAULTS, RunConfig, coerce, describe_defaults, load_config, parse_config_text
from detadapt.errors import ConfigError
from detadapt.trainer import Mode


class TestParsing:
    def test_comments_and_blank_lines(self):
        values = parse_config_text("# run\n\nseed = 7  # trailing\nmode=feature_align\n")
        assert values == {"seed": 7, "mode": "feature_align"}

    def test_unknown_key_names_line_and_key(self):
        with pytest.raises(ConfigError, match=r"run.cfg:2: unknown config key 'lamda'"):
            parse_config_text("seed=1\nlamda=0.5\n", "run.cfg")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="run.cfg:1"):
            parse_config_text("iterations 10", "run.cfg")

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigError, match=r"<config>:1: invalid value"):
            parse_config_text("iterations=ten")


class TestCoercion:
    @pytest.mark.parametrize(
        "key,raw,expected",
        [
            ("iterations", "120", 120),
            ("lambda", "0.1", 0.1),
            ("select_best", "no", False),
            ("select_best", "TRUE", True),
            ("levels", "3,5", (3, 5)),
            ("levels", "", ()),
            ("anchor_sizes", "8, 16, 32", (8.0, 16.0, 32.0)),
            ("mode", "oracle", "oracle"),
            ("ablation_seeds", "0,1,2", (0, 1, 2)),
        ],
    )
    def test_by_default_type(self, key, raw, expected):
        assert coerce(key, raw) == expected

    def test_bool_rejects_noise(self):
        with pytest.raises(ConfigError):
            coerce("select_best", "maybe")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            coerce("nope", "1")


class TestRunConfig:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=3\niterations=50\ndecay_at=25\n")
        config = load_config(path, {"seed": "9"})
        assert config["seed"] == 9
        assert config["iterations"] == 50
        assert config["lambda"] == DEFAULTS["lambda"][0]

    def test_none_overrides_are_ignored(self):
        assert RunConfig().with_overrides({"seed": None})["seed"] == 0

    def test_builds_typed_configs(self):
        config = RunConfig().with_overrides({"mode": "combined_syn2real", "levels": "4", "image_size": "64"})
        train = config.train_config()
        assert train.mode is Mode.COMBINED_SYN2REAL
        assert train.levels == (4,)
        assert train.detector.image_size == 64
        assert config.scene_spec("target", "test").image_size == 64
        assert config.split_count("target", "train") == 500

    def test_ablation_subsets(self):
        config = RunConfig().with_overrides({"ablation_subsets": "none;3+4;5"})
        assert config.ablation_subsets() == [(), (3, 4), (5,)]

    def test_text_round_trip(self, tmp_path):
        config = RunConfig().with_overrides({"levels": "3", "select_best": "false", "lambda": "0.25"})
        path = tmp_path / "config.txt"
        path.write_text(config.to_text())
        assert load_config(path) == config

    def test_defaults_description_parses(self):
        assert parse_config_text(describe_defaults()) == RunConfig().values
