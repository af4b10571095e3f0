import json

import numpy as np
import pytest

from akd.cli import load_config, main, read_scores
from akd.data import load_dataset
from akd.errors import ConfigError
from akd.metrics import eer

from conftest import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny config, a generated dataset and a trained baseline, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(epochs=1)
    cfg.save(root / "config.json")
    assert main(["gen-data", "--config", str(root / "config.json"), "--out", str(root / "data"),
                 "--seed", "3", "--n", "48", "--n-test", "30"]) == 0
    assert main(["train", "--config", str(root / "config.json"), "--data", str(root / "data"),
                 "--out", str(root / "base")]) == 0
    return root


class TestConfig:
    def test_overrides(self):
        cfg = load_config(None, ["epochs=4", "optim.lr=0.01", "student=desk-student-conformer"])
        assert (cfg.epochs, cfg.optim.lr, cfg.student) == (4, 0.01, "desk-student-conformer")

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            load_config(None, ["optim.nope=1"])

    def test_round_trip(self, tmp_path):
        cfg = tiny_config("adaptive_kd", "L_DDSD + L_ED")
        cfg.save(tmp_path / "c.json")
        assert load_config(str(tmp_path / "c.json")).to_dict() == {**cfg.to_dict(), "losses": None}


class TestGenData:
    def test_byte_identical(self, workspace, tmp_path):
        args = ["gen-data", "--config", str(workspace / "config.json"), "--seed", "3", "--n", "48", "--n-test", "30"]
        assert main(args + ["--out", str(tmp_path / "again")]) == 0
        for name in ("train.txt", "val.txt", "test.txt", "manifest.json"):
            if name == "manifest.json":
                a = json.loads((workspace / "data" / name).read_text())
                b = json.loads((tmp_path / "again" / name).read_text())
                assert a["artifacts"] == b["artifacts"]
            else:
                assert (workspace / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_manifest_records_seed(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert manifest["config"]["generator"]["seed"] == 3
        assert set(manifest["artifacts"]) == {"train.txt", "val.txt", "test.txt"}

    def test_zero_examples_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 2
        assert "--n" in capsys.readouterr().err

    def test_bad_config_value(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "pipeline=nope"]) == 2


class TestTrainAndDistill:
    def test_train_outputs(self, workspace):
        base = workspace / "base"
        for name in ("final.ckpt", "best.ckpt", "metrics.csv", "manifest.json"):
            assert (base / name).is_file()
        assert (base / "metrics.csv").read_text().startswith("epoch,split,invocation,")

    def test_train_is_deterministic(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (workspace / "base" / "metrics.csv").read_bytes()
        assert (tmp_path / "final.ckpt").read_bytes() == (workspace / "base" / "final.ckpt").read_bytes()

    def test_conventional_without_teacher(self, workspace, tmp_path, capsys):
        code = main(["distill", "--config", str(workspace / "config.json"), "--set", "pipeline=conventional_kd",
                     "--data", str(workspace / "data"), "--out", str(tmp_path)])
        assert code == 2
        assert "teacher" in capsys.readouterr().err

    def test_distill_rejects_baseline(self, workspace, tmp_path):
        assert main(["distill", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path)]) == 2

    def test_conventional_with_pretrained_encoder(self, workspace, tmp_path):
        cfg = str(workspace / "config.json")
        assert main(["pretrain-teacher", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
        assert main(["distill", "--config", cfg, "--set", "pipeline=conventional_kd", "--set", "losses=null",
                     "--set", "weights.lambda_ed=100", "--data", str(workspace / "data"),
                     "--teacher", str(tmp_path / "t" / "teacher_encoder.ckpt"), "--out", str(tmp_path / "kd")]) == 0
        assert (tmp_path / "kd" / "teacher.ckpt").is_file()
        assert (tmp_path / "kd" / "final.ckpt").is_file()

    def test_missing_data_dir(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "config.json"), "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def _eval(self, workspace, out):
        return main(["eval", "--checkpoint", str(workspace / "base" / "final.ckpt"),
                     "--data", str(workspace / "data" / "test.txt"), "--out", str(out)])

    def test_report(self, workspace, tmp_path):
        assert self._eval(workspace, tmp_path / "a") == 0
        lines = (tmp_path / "a" / "report.txt").read_text().splitlines()
        assert [l.split()[0] for l in lines] == ["HAG", "AG", "FCO"]
        assert {p.name for p in (tmp_path / "a").glob("det_*.csv")} == {"det_HAG.csv", "det_AG.csv", "det_FCO.csv"}

    def test_deterministic(self, workspace, tmp_path):
        self._eval(workspace, tmp_path / "a")
        self._eval(workspace, tmp_path / "b")
        assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()

    def test_report_matches_metrics_module(self, workspace, tmp_path):
        self._eval(workspace, tmp_path)
        sets = read_scores(tmp_path / "scores.csv")
        for line in (tmp_path / "report.txt").read_text().splitlines():
            inv, rate, thr = line.split()
            want = next(eer(s) for i, s in sets.items() if i.name == inv)
            assert rate == f"eer={want[0]:.6f}" and thr == f"threshold={want[1]:.6f}"

    def test_scores_cover_dataset(self, workspace, tmp_path):
        self._eval(workspace, tmp_path)
        data = load_dataset(workspace / "data" / "test.txt")
        assert sum(s.labels.size for s in read_scores(tmp_path / "scores.csv").values()) == len(data)

    def test_dimension_mismatch(self, workspace, tmp_path, capsys):
        other = tmp_path / "d"
        assert main(["gen-data", "--out", str(other), "--n", "4", "--n-test", "4",
                     "--set", "generator.dim=5"]) == 0
        code = main(["eval", "--checkpoint", str(workspace / "base" / "final.ckpt"),
                     "--data", str(other / "test.txt"), "--out", str(tmp_path / "e")])
        assert code == 2
        err = capsys.readouterr().err
        assert "12-dim" in err and "5-dim" in err

    def test_det_from_scores(self, workspace, tmp_path):
        self._eval(workspace, tmp_path / "e")
        assert main(["det", "--scores", str(tmp_path / "e" / "scores.csv"), "--out", str(tmp_path / "d"),
                     "--invocation", "AG"]) == 0
        assert (tmp_path / "d" / "det_AG.csv").read_bytes() == (tmp_path / "e" / "det_AG.csv").read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(tmp_path / "y"),
                     "--out", str(tmp_path)]) == 2

    def test_no_command(self):
        assert main([]) == 2
