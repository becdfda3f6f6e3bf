"""Command-line interface tests (in-process through cli.main)."""

import json

import numpy as np
import pytest

from gyroshot.cli import RunConfig, main
from gyroshot.errors import ConfigError
from gyroshot.netmods import load_checkpoint

TINY = {
    "c": 0.5,
    "n_classes": 6,
    "samples_per_class": 12,
    "patch_dim": 4,
    "grid_h": 2,
    "grid_w": 2,
    "n_way": 3,
    "k_shot": 2,
    "n_query": 2,
    "feat_dim": 4,
    "enc_hidden": 8,
    "relation_filters": 4,
    "epochs": 1,
    "tasks_per_epoch": 3,
    "val_fraction": 0.0,
    "eval_epochs": 1,
    "eval_tasks": 3,
    "outlier_grid": [0, 1],
}


def write_cfg(tmp_path, fname="cfg.json", **extra):
    cfg = dict(TINY)
    cfg.update(extra)
    path = tmp_path / fname
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig({})
        assert cfg.n_way == 5 and cfg.k_shot == 5
        assert cfg.c is None and cfg.resolved_c() == 0.7

    def test_low_shot_default_curvature(self):
        assert RunConfig({"k_shot": 1}).resolved_c() == 0.5
        assert RunConfig({"k_shot": 1, "c": 0.3}).resolved_c() == 0.3

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig({"learning_rte": 0.1})

    def test_type_coercion_errors(self):
        with pytest.raises(ConfigError, match="integer"):
            RunConfig({"epochs": 2.5})
        with pytest.raises(ConfigError, match="boolean"):
            RunConfig({"use_fphi": 1})
        with pytest.raises(ConfigError, match="number"):
            RunConfig({"temperature": "hot"})
        with pytest.raises(ConfigError, match="list of integers"):
            RunConfig({"outlier_grid": [0, "1"]})

    def test_int_accepted_for_float(self):
        assert RunConfig({"temperature": 2}).temperature == 2.0

    def test_override_returns_new(self):
        a = RunConfig({})
        b = a.override(seed=9)
        assert a.seed == 0 and b.seed == 9

    def test_derived_structures(self):
        cfg = RunConfig(TINY)
        assert cfg.ball().c == 0.5
        assert cfg.train_cfg().n_way == 3
        assert cfg.synth().grid == (2, 2)
        assert cfg.model_cfg((2, 2, 4)).hw == 4

    def test_from_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            RunConfig.from_file(tmp_path / "nope.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        with pytest.raises(ConfigError, match="not valid JSON"):
            RunConfig.from_file(bad)
        arr = tmp_path / "arr.json"
        arr.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            RunConfig.from_file(arr)


class TestPipeline:
    def test_gen_train_eval_flow(self, tmp_path, capsys):
        cfg_path = write_cfg(
            tmp_path,
            dataset=str(tmp_path / "gen/dataset.bin"),
            checkpoint=str(tmp_path / "train/checkpoint.bin"),
        )
        assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "gen")]) == 0
        assert (tmp_path / "gen/dataset.bin").exists()
        echoed = json.loads((tmp_path / "gen/config.json").read_text())
        assert echoed["n_classes"] == 6 and echoed["seed"] == 0

        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "train")]) == 0
        ckpt = load_checkpoint(tmp_path / "train/checkpoint.bin")
        assert "encoder.w1" in ckpt
        lines = (tmp_path / "train/metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,task,accuracy,loss"
        assert len(lines) == 1 + TINY["epochs"] * TINY["tasks_per_epoch"]

        assert main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "eval")]) == 0
        out = capsys.readouterr().out
        assert "accuracy" in out and "+/-" in out
        report = (tmp_path / "eval/report.txt").read_text()
        # the reported mean must be the mean of the per-task CSV column
        eval_rows = (tmp_path / "eval/metrics.csv").read_text().splitlines()[1:]
        accs = [float(r.split(",")[2]) for r in eval_rows]
        assert report.startswith(f"accuracy {np.mean(accs) * 100:.2f}%")
        assert f"over {len(accs)} tasks" in report

    def test_train_deterministic_across_runs(self, tmp_path):
        cfg_path = write_cfg(tmp_path, dataset=str(tmp_path / "g/dataset.bin"))
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/checkpoint.bin").read_bytes() == (
            tmp_path / "b/checkpoint.bin"
        ).read_bytes()
        assert (tmp_path / "a/metrics.csv").read_bytes() == (
            tmp_path / "b/metrics.csv"
        ).read_bytes()

    def test_gen_same_seed_byte_identical(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g1")])
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g2")])
        assert (tmp_path / "g1/dataset.bin").read_bytes() == (
            tmp_path / "g2/dataset.bin"
        ).read_bytes()

    def test_resume_continues_deterministically(self, tmp_path):
        cfg_path = write_cfg(tmp_path, dataset=str(tmp_path / "g/dataset.bin"))
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "base")])
        resume_path = write_cfg(
            tmp_path, fname="resume.json",
            dataset=str(tmp_path / "g/dataset.bin"),
            resume=str(tmp_path / "base/checkpoint.bin"),
        )
        main(["train", "--config", str(resume_path), "--out", str(tmp_path / "r1")])
        main(["train", "--config", str(resume_path), "--out", str(tmp_path / "r2")])
        r1 = (tmp_path / "r1/checkpoint.bin").read_bytes()
        assert r1 == (tmp_path / "r2/checkpoint.bin").read_bytes()
        assert (tmp_path / "r1/metrics.csv").read_bytes() == (
            tmp_path / "r2/metrics.csv"
        ).read_bytes()
        # the resumed run trains on from the base weights, not in place
        assert r1 != (tmp_path / "base/checkpoint.bin").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg_path = write_cfg(tmp_path, dataset=str(tmp_path / "g/dataset.bin"))
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        main(["train", "--config", str(cfg_path), "--seed", "5", "--out", str(tmp_path / "s5")])
        main(["train", "--config", str(cfg_path), "--seed", "6", "--out", str(tmp_path / "s6")])
        echoed = json.loads((tmp_path / "s5/config.json").read_text())
        assert echoed["seed"] == 5
        assert (tmp_path / "s5/checkpoint.bin").read_bytes() != (
            tmp_path / "s6/checkpoint.bin"
        ).read_bytes()

    def test_robustness_csv(self, tmp_path):
        cfg_path = write_cfg(tmp_path, dataset=str(tmp_path / "g/dataset.bin"))
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        assert main(["robustness", "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == 0
        lines = (tmp_path / "r/robustness.csv").read_text().splitlines()
        assert lines[0] == "variant,n_outliers,accuracy,ci95"
        # 3 variants x 2 outlier levels
        assert len(lines) == 1 + 3 * 2
        for name in ("app2s", "prototype", "euclidean_ap2s"):
            assert (tmp_path / f"r/checkpoint_{name}.bin").exists()


class TestErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"learning_rte": 0.1}')
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "ConfigError" in capsys.readouterr().err

    def test_missing_dataset_key(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "ConfigError" in err and "dataset" in err

    def test_missing_dataset_file(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, dataset=str(tmp_path / "absent.bin"))
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
        assert "OSError" in capsys.readouterr().err

    def test_negative_seed(self, tmp_path, capsys):
        assert main(["gen", "--seed", "-1", "--out", str(tmp_path / "o")]) == 1
        assert "ConfigError" in capsys.readouterr().err

    def test_zero_classes_rejected(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, n_classes=0)
        assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
        assert "ShapeError" in capsys.readouterr().err

    def test_invalid_optimizer_name(self, tmp_path, capsys):
        cfg_path = write_cfg(
            tmp_path, dataset=str(tmp_path / "g/dataset.bin"), optimizer="lbfgs"
        )
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "ConfigError" in err and "optimizer" in err

    def test_missing_resume_checkpoint(self, tmp_path, capsys):
        cfg_path = write_cfg(
            tmp_path,
            dataset=str(tmp_path / "g/dataset.bin"),
            resume=str(tmp_path / "absent.bin"),
        )
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
        assert "Error" in capsys.readouterr().err

    def test_corrupt_checkpoint_reported(self, tmp_path, capsys):
        cfg_path = write_cfg(
            tmp_path,
            dataset=str(tmp_path / "g/dataset.bin"),
            checkpoint=str(tmp_path / "g/dataset.bin"),  # wrong file on purpose
        )
        main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "g")])
        assert main(["eval", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
        assert "DataFormatError" in capsys.readouterr().err


class TestVerifyCommand:
    def test_verify_passes_and_writes_report(self, tmp_path, capsys):
        assert main(["verify", "--out", str(tmp_path / "v")]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out
        report = (tmp_path / "v/report.txt").read_text()
        assert "properties hold" in report
        assert report.count("[PASS]") == 16
