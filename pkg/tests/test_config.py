import logging

import pytest

from sesame.config import KNOWN_KEYS, build, format_config, load, parse_text
from sesame.errors import ConfigurationError
from sesame.training import DEFAULT_SIGMA_GRID


class TestParse:
    def test_comments_and_blanks(self):
        text = "# run\n\nd = 32  # width\nblur_mode = on_outputs\n"
        assert parse_text(text) == {"d": "32", "blur_mode": "on_outputs"}

    @pytest.mark.parametrize(
        "text, message",
        [
            ("d 32\n", "expected 'key = value'"),
            ("= 3\n", "expected 'key = value'"),
            ("depth = 3\n", "unknown config key 'depth'"),
            ("d = 8\nd = 16\n", "duplicate config key 'd'"),
        ],
    )
    def test_rejects(self, text, message):
        with pytest.raises(ConfigurationError, match=message):
            parse_text(text, "run.cfg")

    def test_line_numbers(self):
        with pytest.raises(ConfigurationError, match=r"run.cfg:3:"):
            parse_text("d = 8\n# x\nbogus = 1\n", "run.cfg")


class TestBuild:
    def test_types(self, tmp_path):
        run = build(parse_text("d = 32\nse = false\nlearning_rate = 2e-3\nr = none\nsigma_grid = 0.1, 0.5"), tmp_path)
        assert run.model.d == 32 and run.model.se is False and run.model.r is None
        assert run.train.learning_rate == 2e-3
        assert run.sigma_grid == (0.1, 0.5)

    def test_defaults(self, tmp_path):
        run = build({}, tmp_path)
        assert run.task == "hans-style" and run.sigma_grid == DEFAULT_SIGMA_GRID
        assert run.out_dir == tmp_path / "out" and run.train_data is None

    def test_defaults_are_logged(self, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="sesame.config"):
            build({"d": "8"}, tmp_path)
        logged = caplog.text
        assert "'epochs' not set" in logged and "'d' not set" not in logged

    def test_paths_relative_to_base(self, tmp_path):
        run = build({"train_data": "data/train.tsv", "out_dir": "runs/a"}, tmp_path)
        assert run.train_data == tmp_path / "data" / "train.tsv" and run.out_dir == tmp_path / "runs" / "a"

    @pytest.mark.parametrize(
        "values, message",
        [
            ({"d": "eight"}, "cannot read 'eight' as int"),
            ({"se": "yes"}, "as bool"),
            ({"task": "nli"}, "task"),
            ({"sigma_grid": ","}, "empty"),
            ({"sigma_grid": "a,b"}, "comma-separated"),
            ({"blur_mode": "sideways"}, "blur"),
            ({"epochs": "0"}, "epochs"),
        ],
    )
    def test_invalid_values(self, tmp_path, values, message):
        with pytest.raises(ConfigurationError, match=message):
            build(values, tmp_path)

    def test_to_dict_excludes_paths(self, tmp_path):
        d = build({"train_data": "x.tsv"}, tmp_path).to_dict()
        assert set(d) == {"model", "train", "task"} and d["train"]["epochs"] == 10


class TestFiles:
    def test_load_round_trip(self, tmp_path):
        values = {"d": 32, "se": False, "sigma_grid": (0.1, 0.3), "train_data": "t.tsv"}
        path = tmp_path / "run.cfg"
        path.write_text(format_config(values))
        run = load(path)
        assert run.model.d == 32 and run.model.se is False and run.sigma_grid == (0.1, 0.3)
        assert run.train_data == tmp_path / "t.tsv"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot read config"):
            load(tmp_path / "absent.cfg")

    def test_known_keys_cover_dataclasses(self):
        assert {"d", "sigma", "pooling", "epochs", "seed", "out_dir"} <= KNOWN_KEYS
