import csv
import json

import pytest

from sesame.cli import EXIT_CHECK, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main

SMALL_MODEL = "vocab_size = 30\nmax_len = 16\nd = 8\nh = 2\nn_layers = 2\nepochs = 1\nbatch_size = 8\n"


def read_rows(path):
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def workdir(tmp_path):
    assert main(["-q", "gen-data", "--task", "hans-style", "--seed", "0", "--out", str(tmp_path / "data"),
                 "--per-case", "3", "--train-size", "16", "--dev-size", "8"]) == EXIT_OK
    return tmp_path


def write_config(root, name="run.cfg", extra=""):
    path = root / name
    path.write_text(
        SMALL_MODEL
        + "train_data = data/train.tsv\ndev_data = data/dev.tsv\ndiagnostic_data = data/diagnostic.tsv\n"
        + f"out_dir = out_{path.stem}\n"
        + extra
    )
    return path


class TestGenData:
    def test_manifest(self, workdir):
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert manifest["splits"]["diagnostic"]["count"] == 18
        assert manifest["splits"]["train"]["labels"] == {"entailment": 8, "non_entailment": 8}

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            main(["-q", "gen-data", "--task", "local", "--seed", "4", "--out", str(tmp_path / name),
                  "--train-size", "20", "--dev-size", "10"])
        for f in ("train.tsv", "dev.tsv", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_task_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--task", "nli", "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["-q", "gen-data", "--task", "local", "--out", str(blocker / "sub")]) == EXIT_USAGE
        assert "cannot write" in capsys.readouterr().err


class TestTrainEval:
    def test_train_then_eval(self, workdir):
        cfg = write_config(workdir)
        assert main(["-q", "train", "--config", str(cfg)]) == EXIT_OK
        out = workdir / "out_run"
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["split_accuracies"]) == {"dev", "diagnostic"}
        assert metrics["config"]["model"]["d"] == 8
        assert len(read_rows(out / "heuristics.csv")) == 6

        assert main(["-q", "eval", "--config", str(cfg), "--checkpoint", str(out / "model.bin")]) == EXIT_OK
        evaluated = json.loads((out / "eval_metrics.json").read_text())
        assert evaluated["split_accuracies"] == metrics["split_accuracies"]

    def test_train_is_deterministic(self, workdir):
        a, b = write_config(workdir, "a.cfg"), write_config(workdir, "b.cfg")
        main(["-q", "train", "--config", str(a)])
        main(["-q", "train", "--config", str(b)])
        for f in ("metrics.json", "model.bin", "heuristics.csv"):
            assert (workdir / "out_a" / f).read_bytes() == (workdir / "out_b" / f).read_bytes()

    def test_eval_shape_mismatch(self, workdir, capsys):
        main(["-q", "train", "--config", str(write_config(workdir))])
        wide = write_config(workdir, "wide.cfg")
        wide.write_text(wide.read_text().replace("d = 8", "d = 16").replace("out_wide", "out_run"))
        code = main(["-q", "eval", "--config", str(wide), "--checkpoint", str(workdir / "out_run" / "model.bin")])
        assert code == EXIT_USAGE
        assert "embed.tokens: stored (30, 8), expected (30, 16)" in capsys.readouterr().err

    def test_missing_train_data(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_MODEL)
        assert main(["-q", "train", "--config", str(cfg)]) == EXIT_USAGE
        assert "train_data" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("depth = 3\n")
        assert main(["-q", "train", "--config", str(cfg)]) == EXIT_USAGE

    def test_divergence_exit_code(self, workdir, capsys):
        cfg = write_config(workdir, extra="learning_rate = 1e300\n")
        with pytest.warns(RuntimeWarning):
            code = main(["-q", "train", "--config", str(cfg)])
        assert code == EXIT_DIVERGED
        assert "diverged" in capsys.readouterr().err


class TestSweepReport:
    def test_sweep_and_report(self, workdir):
        cfg = write_config(workdir, "sw.cfg", "blur_mode = on_outputs\nsigma_grid = 0.1,0.5\n")
        assert main(["-q", "sweep", "--config", str(cfg)]) == EXIT_OK
        out = workdir / "out_sw"
        rows = read_rows(out / "sweep_summary.csv")
        assert [r["sigma"] for r in rows] == ["0.10000000000000001", "0.5"]
        assert sum(r["selected"] == "yes" for r in rows) == 1
        assert (out / rows[1]["cell"] / "model.bin").exists()

        assert main(["-q", "report", "--metrics", str(out)]) == EXIT_OK
        assert len(read_rows(out / "heuristics.csv")) == 6
        weights = read_rows(out / "layer_weights.csv")
        assert [w["layer"] for w in weights] == ["1", "2"] and {w["runs"] for w in weights} == {"2"}
        assert len(read_rows(out / "loss_curves.csv")) == 2 * 2

    def test_sweep_needs_blur(self, workdir):
        assert main(["-q", "sweep", "--config", str(write_config(workdir))]) == EXIT_USAGE

    def test_report_empty_dir(self, tmp_path):
        assert main(["-q", "report", "--metrics", str(tmp_path)]) == EXIT_USAGE

    def test_bad_thread_count(self, workdir, monkeypatch):
        monkeypatch.setenv("SESAME_THREADS", "0")
        cfg = write_config(workdir, "sw.cfg", "blur_mode = on_outputs\n")
        assert main(["-q", "sweep", "--config", str(cfg)]) == EXIT_USAGE


class TestGradcheckCommand:
    def test_blur_scope_passes(self, capsys):
        assert main(["-q", "gradcheck", "--scope", "blur"]) == EXIT_OK
        assert "blur: max relative error" in capsys.readouterr().out

    def test_injected_fault_fails(self, capsys):
        assert main(["-q", "gradcheck", "--scope", "se", "--inject-fault"]) == EXIT_CHECK
        err = capsys.readouterr().err
        assert "se:" in err and "relative error" in err
