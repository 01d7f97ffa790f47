import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from dcwp import cli
from dcwp import data as bd

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY_CFG = """
# small synthetic run
n_train = 1200
n_test = 600
hidden_dims = 16, 16
batch_size = 64
pretrain_iters = 50
t1 = 50
t2 = 10   # pruning parameters
t3 = 10
ratio = 0.02
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestConfigParsing:
    def test_file_values_are_typed(self, cfg_file):
        values = cli.read_config_file(cfg_file)
        assert values["hidden_dims"] == (16, 16) and values["t2"] == 10 and values["ratio"] == 0.02

    def test_aliases(self):
        assert cli.parse_assignments(["l1=1e-7", "up=10", "align=0.1"]) == {
            "lambda_l1": 1e-7, "lambda_up": 10.0, "lambda_align": 0.1}

    @pytest.mark.parametrize("text", ["true", "1", "yes"])
    def test_booleans(self, text):
        assert cli.parse_value("reset", text) == ("reset", True)

    @pytest.mark.parametrize("item", ["nokey", "bogus=1", "t2=abc", "reset=maybe"])
    def test_bad_assignments(self, item):
        with pytest.raises(cli.UsageError):
            cli.parse_assignments([item])

    def test_ablation_flags(self):
        assert cli.parse_ablation("no-pruning,no-align") == {"pruning": False, "alignment": False}
        assert cli.parse_ablation("idx5") == {"pruning": True, "wce": True, "alignment": False}
        with pytest.raises(cli.UsageError):
            cli.parse_ablation("idx2")

    def test_benchmark_configs_parse(self):
        for name in ("synthetic", "cmnist"):
            cli.build_config(cli.build_parser().parse_args(
                ["train", "--config", str(CONFIGS / f"{name}.cfg"), "--out", "unused"]))


class TestTheory:
    def test_bounds_csv(self, capsys, tmp_path):
        out = tmp_path / "b.csv"
        code, text, _ = run(capsys, "theory", "bounds", "--p", "0.9", "--n", "3000", "--out", out)
        assert code == 0 and "0 bound violations" in text
        rows = read_csv(out)
        assert len(rows) == 25
        for r in rows:
            assert float(r["phi"]) == pytest.approx(1 - 1 / 1.8)
            assert float(r["mixture_bound"]) == pytest.approx(float(r["test_bound"]), rel=1e-12)

    def test_bounds_to_stdout(self, capsys):
        code, text, _ = run(capsys, "theory", "bounds", "--p", "0.75", "--D", "3", "--n", "500")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
        assert len(rows) == 25 and float(rows[0]["p"]) == 0.75

    def test_bad_phi(self, capsys):
        code, _, err = run(capsys, "theory", "bounds", "--phi", "1.5", "--n", "10")
        assert code == 2 and "phi" in err

    def test_flow(self, capsys, tmp_path):
        out = tmp_path / "f.csv"
        code, text, _ = run(capsys, "theory", "flow", "--p", "0.75", "--D", "5", "--out", out)
        assert code == 0 and "envelopes hold" in text
        rows = read_csv(out)
        assert len(rows) == 100
        assert all(float(r["alpha"]) > 0 for r in rows)

    def test_flow_rejects_unbiased_p(self, capsys):
        assert run(capsys, "theory", "flow", "--p", "0.5")[0] == 2

    def test_misalign(self, capsys):
        code, text, _ = run(capsys, "theory", "misalign", "--D", "3", "--Q", "16", "--pairs", "5000")
        assert code == 0 and "expected 0.2500" in text

    def test_misalign_needs_wide_embedding(self, capsys):
        code, _, err = run(capsys, "theory", "misalign", "--D", "15", "--Q", "8")
        assert code == 2 and "Q" in err

    def test_ratio(self, capsys, tmp_path):
        out = tmp_path / "r.csv"
        code, _, _ = run(capsys, "theory", "ratio", "--p", "0.6,0.99", "--epochs", "20", "--seeds", "2",
                         "--out", out)
        rows = read_csv(out)
        assert code == 0 and float(rows[0]["alpha_mean"]) < float(rows[1]["alpha_mean"])

    def test_failed_check_exits_one(self, capsys, monkeypatch):
        from dcwp import theory
        real = theory.misalignment_experiment

        def skewed(*args):
            r = real(*args)
            r.cross_mean += 1.0
            return r

        monkeypatch.setattr(theory, "misalignment_experiment", skewed)
        assert run(capsys, "theory", "misalign", "--D", "3", "--Q", "8", "--pairs", "200")[0] == 1


class TestData:
    def test_binary_generation_is_reproducible(self, capsys, tmp_path):
        args = ["data", "gen-binary", "--p", "0.75", "--D", "4", "--phi", "0.2", "--n", "500"]
        assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["group_counts"] == mb["group_counts"]
        assert ma["input_hash"] == mb["input_hash"]
        ds = bd.load_dataset(tmp_path / "a" / "train.dcwpd")
        assert len(ds) == 500 and ds.x.shape[1] == 5

    def test_binary_rejects_bad_phi(self, capsys, tmp_path):
        assert run(capsys, "data", "gen-binary", "--phi", "2", "--out", tmp_path)[0] == 2

    def test_cmnist_from_idx(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        src = tmp_path / "mnist"
        src.mkdir()
        for split, n in (("train", 400), ("test", 100)):
            img, lbl = bd.MNIST_FILES[split]
            bd.write_idx(src / f"{img}.gz", rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8))
            bd.write_idx(src / lbl, rng.integers(0, 10, size=n, dtype=np.uint8))
        code, text, _ = run(capsys, "data", "gen-cmnist", "--ratio", "0.05", "--data-dir", src,
                            "--out", tmp_path / "out")
        assert code == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["group_counts"]["train"]["conflicting"] == 20
        assert len(manifest["inputs"]) == 4
        test = bd.load_dataset(tmp_path / "out" / "test.dcwpd")
        assert test.x.shape == (100, 3 * 28 * 28)

    def test_missing_idx_names_path(self, capsys, tmp_path):
        code, _, err = run(capsys, "data", "gen-cmnist", "--data-dir", tmp_path / "nowhere",
                           "--out", tmp_path / "o")
        assert code == 2 and "train-images-idx3-ubyte" in err


class TestTrainAndReport:
    def test_train_writes_manifest_and_artifacts(self, capsys, tmp_path, cfg_file):
        out = tmp_path / "run"
        code, text, _ = run(capsys, "train", "--config", cfg_file, "--method", "dcwp", "--out", out)
        assert code == 0 and "unbiased_accuracy" in text
        manifest = cli.RunManifest.read(out / "manifest.json")
        assert manifest.config["t2"] == 10 and manifest.seed == 0
        for key in ("checkpoint", "metrics", "mask"):
            assert key in manifest.artifacts
        for name in ("model.ckpt", "metrics.json", "mask.bin", "mask.json", "results.jsonl"):
            assert (out / name).exists()

    def test_refuses_to_overwrite_a_run(self, capsys, tmp_path, cfg_file):
        out = tmp_path / "run"
        assert run(capsys, "train", "--config", cfg_file, "--method", "erm", "--out", out)[0] == 0
        code, _, err = run(capsys, "train", "--config", cfg_file, "--method", "erm", "--out", out)
        assert code == 2 and "overwrite" in err

    def test_rerun_from_manifest_is_identical(self, capsys, tmp_path, cfg_file):
        a, b = tmp_path / "a", tmp_path / "b"
        run(capsys, "train", "--config", cfg_file, "--set", "seed=3", "--out", a)
        code, _, _ = run(capsys, "train", "--from-manifest", a / "manifest.json", "--out", b)
        assert code == 0
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_from_manifest_is_exclusive(self, capsys, tmp_path, cfg_file):
        code = run(capsys, "train", "--from-manifest", "m.json", "--config", cfg_file, "--out", tmp_path)[0]
        assert code == 2

    def test_ablation_switches_modules_off(self, capsys, tmp_path, cfg_file):
        out = tmp_path / "idx3"
        run(capsys, "train", "--config", cfg_file, "--ablation", "no-pruning,no-align", "--out", out)
        config = json.loads((out / "manifest.json").read_text())["config"]
        assert (config["pruning"], config["alignment"], config["wce"]) == (False, False, True)
        assert not (out / "mask.bin").exists()
        assert json.loads((out / "metrics.json").read_text())["pruning_ratio"] is None

    def test_sweep_and_report(self, capsys, tmp_path, cfg_file):
        out = tmp_path / "sweep"
        code, _, _ = run(capsys, "train", "--config", cfg_file, "--sweep", "l1=1e-9,1e-2", "--out", out)
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert [float(r["lambda_l1"]) for r in rows] == [1e-9, 1e-2]
        assert len((out / "results.jsonl").read_text().splitlines()) == 2
        runs = sorted(p for p in out.iterdir() if p.is_dir())
        code, text, _ = run(capsys, "report", *runs, "--csv", tmp_path / "r.csv",
                            "--jsonl", tmp_path / "r.jsonl")
        assert code == 0
        header = text.splitlines()[0].split()
        assert header[0] == "run" and "pruning_ratio" in header and "mining_precision" in header
        assert len(read_csv(tmp_path / "r.csv")) == 2

    def test_bad_sweep(self, capsys, tmp_path, cfg_file):
        assert run(capsys, "train", "--config", cfg_file, "--sweep", "t2", "--out", tmp_path)[0] == 2
        assert run(capsys, "train", "--config", cfg_file, "--sweep", "t2=0", "--out", tmp_path)[0] == 2

    def test_report_needs_metrics(self, capsys, tmp_path):
        assert run(capsys, "report", tmp_path)[0] == 2

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--config", tmp_path / "none.cfg", "--out", tmp_path)
        assert code == 2 and "none.cfg" in err

    def test_run_failure_exits_one(self, capsys, tmp_path, cfg_file):
        code, _, err = run(capsys, "train", "--config", cfg_file, "--set", "theta_init=-20",
                           "--set", "theta_lr=1e-6", "--out", tmp_path / "x")
        assert code == 1 and "pruned" in err

    def test_cmnist_run_needs_data(self, capsys, tmp_path, cfg_file):
        code, _, err = run(capsys, "train", "--config", cfg_file, "--set", "dataset=cmnist",
                           "--set", f"data_dir={tmp_path}", "--out", tmp_path / "c")
        assert code == 2 and "missing MNIST file" in err


def test_table_renders_skips():
    table = cli.render_table([{"run": "a", "unbiased_accuracy": 0.5, "mining_precision": None}])
    assert "skip" in table and "0.5000" in table
