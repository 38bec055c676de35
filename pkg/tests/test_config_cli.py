"""Strict config parsing, identity hashing, presets and the CLI surface."""

from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from semfl.cli import main
from semfl.config import (ExperimentConfig, config_from_dict, load_config,
                          preset_path, save_config)
from semfl.errors import ConfigError


def smoke_doc(**top):
    doc = yaml.safe_load(preset_path("smoke").read_text())
    doc.update(top)
    return doc


class TestConfigParsing:
    def test_empty_document_resolves_defaults(self):
        cfg = config_from_dict({})
        assert cfg.rounds == 100
        assert cfg.provider == "synthetic"
        assert cfg.partition.scenario == "dirichlet"
        assert cfg.partition.alpha == 0.5
        assert cfg.backbone.num_classes == cfg.dataset.num_classes

    def test_unknown_keys_rejected_everywhere(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            config_from_dict({"mystery": 1})
        with pytest.raises(ConfigError, match="unknown key.*dataset"):
            config_from_dict({"dataset": {"nois": 0.1}})
        with pytest.raises(ConfigError, match="training.weights"):
            config_from_dict({"training": {"weights": {"lambda_kdd": 1.0}}})

    def test_all_violations_reported_at_once(self):
        doc = {"mystery": 1, "dataset": {"nois": 0.1},
               "training": {"weights": {"lambda_kdd": 1.0}}}
        with pytest.raises(ConfigError) as info:
            config_from_dict(doc)
        message = str(info.value)
        assert "mystery" in message
        assert "nois" in message
        assert "lambda_kdd" in message

    def test_cross_field_validation_collects_problems(self):
        doc = {"provider": "imaginary",
               "partition": {"num_clients": 2},
               "training": {"clients_per_round": 5},
               "extraction": {"feature_dim": 16},
               "backbone": {"architecture": "tinycnn", "feature_dim": 32}}
        with pytest.raises(ConfigError) as info:
            config_from_dict(doc)
        message = str(info.value)
        assert "provider" in message
        assert "clients_per_round" in message
        assert "feature_dim" in message

    def test_top_level_seed_fills_subsections(self):
        cfg = config_from_dict({"seed": 5})
        assert cfg.partition.seed == 5
        assert cfg.extraction.seed == 5
        assert cfg.training.seed == 5
        assert cfg.backbone.seed == 5

    def test_explicit_subsection_seed_survives(self):
        cfg = config_from_dict({"seed": 5, "partition": {"seed": 9}})
        assert cfg.partition.seed == 9
        assert cfg.training.seed == 5

    def test_archive_shape_autofill_and_mismatch(self):
        cfg = config_from_dict({"dataset": {"name": "cifar100"},
                                "backbone": {"architecture": "tinycnn"}})
        assert cfg.dataset.num_classes == 100
        assert cfg.dataset.image_size == 32
        assert cfg.backbone.num_classes == 100
        with pytest.raises(ConfigError, match="10 classes"):
            config_from_dict({"dataset": {"name": "cifar10",
                                          "num_classes": 5}})

    def test_non_integer_seed_rejected(self):
        with pytest.raises(ConfigError, match="seed"):
            config_from_dict({"seed": "zero"})


class TestConfigHash:
    def test_stable_hex_identity(self):
        a = config_from_dict(smoke_doc())
        b = config_from_dict(smoke_doc())
        assert a.config_hash() == b.config_hash()
        assert len(a.config_hash()) == 16
        int(a.config_hash(), 16)

    def test_locations_do_not_change_identity(self):
        base = config_from_dict(smoke_doc())
        moved = config_from_dict(smoke_doc(output_dir="elsewhere/run",
                                           store_dir="elsewhere/store"))
        cached = config_from_dict(
            smoke_doc(dataset={**smoke_doc()["dataset"],
                               "cache_dir": "/somewhere/else",
                               "download": False}))
        assert moved.config_hash() == base.config_hash()
        assert cached.config_hash() == base.config_hash()

    def test_substantive_keys_change_identity(self):
        base = config_from_dict(smoke_doc())
        doc = smoke_doc()
        doc["training"]["lr"] = doc["training"]["lr"] * 2
        assert config_from_dict(doc).config_hash() != base.config_hash()

    def test_to_dict_round_trip_preserves_identity(self):
        cfg = config_from_dict(smoke_doc())
        again = config_from_dict(cfg.to_dict())
        assert again.config_hash() == cfg.config_hash()


class TestConfigFiles:
    def test_load_config_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("a: [unclosed\n")
        with pytest.raises(ConfigError, match="could not parse"):
            load_config(bad)

    def test_save_config_snapshot(self, tmp_path):
        cfg = config_from_dict(smoke_doc())
        out = tmp_path / "config.json"
        save_config(cfg, out)
        doc = json.loads(out.read_text())
        assert doc["config_hash"] == cfg.config_hash()
        assert doc["training"]["weights"]["tau"] == \
            cfg.training.weights.tau

    def test_packaged_presets_parse(self):
        for name in ("smoke", "desk", "desk_synthetic"):
            cfg = load_config(preset_path(name))
            assert isinstance(cfg, ExperimentConfig)

    def test_unknown_preset_lists_available(self):
        with pytest.raises(ConfigError, match="smoke"):
            preset_path("imaginary")


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCliPartition:
    def test_writes_assignment_file(self, tmp_path, capsys):
        out = tmp_path / "part.json"
        code, stdout, _ = run_cli(
            capsys, "partition", "--dataset", "synthetic",
            "--train-samples", "60", "--test-samples", "12",
            "--num-classes", "4", "--scenario", "dirichlet",
            "--alpha", "0.5", "--clients", "3", "--out", str(out))
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["scenario"] == "dirichlet"
        assert isinstance(doc["clients"], list) and len(doc["clients"]) == 3
        stats = json.loads(stdout)
        assert sum(stats["sample_counts"]) == 60

    def test_unknown_dataset_is_config_error(self, tmp_path, capsys):
        code, _, stderr = run_cli(
            capsys, "partition", "--dataset", "mystery",
            "--out", str(tmp_path / "p.json"))
        assert code == 2
        assert "config error" in stderr


class TestCliExtract:
    def test_builds_store(self, tmp_path, capsys):
        out = tmp_path / "store"
        code, stdout, _ = run_cli(
            capsys, "extract-features", "--dataset", "synthetic",
            "--train-samples", "24", "--test-samples", "8",
            "--num-classes", "3", "--dim", "6", "--out", str(out))
        assert code == 0
        doc = json.loads(stdout)
        assert doc["samples"] == 24
        assert doc["feature_dim"] == 6
        assert (out / "manifest.json").is_file()


class TestCliTrainEvaluatePlot:
    def train_smoke(self, capsys, run_dir, *extra):
        return run_cli(capsys, "train", "--preset", "smoke",
                       "--output-dir", str(run_dir), *extra)

    def test_train_then_evaluate_then_plot(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code, stdout, _ = self.train_smoke(capsys, run_dir)
        assert code == 0
        summary = json.loads(stdout)
        for key in ("final_acc", "best_acc", "best_round", "config_hash"):
            assert key in summary
        assert (run_dir / "metrics.csv").is_file()

        code, stdout, _ = run_cli(capsys, "evaluate", "--run", str(run_dir))
        assert code == 0
        scored = json.loads(stdout)
        assert scored["test_acc"] == pytest.approx(summary["final_acc"])

        code, stdout, _ = run_cli(capsys, "plot", "--run", str(run_dir))
        assert code == 0
        assert (run_dir / "accuracy.png").is_file()

    def test_overrides_reach_the_snapshot(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        code, _, _ = self.train_smoke(capsys, run_dir, "--rounds", "0",
                                      "--seed", "3")
        assert code == 0
        doc = json.loads((run_dir / "config.json").read_text())
        assert doc["rounds"] == 0
        assert doc["seed"] == 3

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, stderr = run_cli(capsys, "train", "--config",
                                  str(tmp_path / "nope.yaml"))
        assert code == 2
        assert "config error" in stderr

    def test_unknown_preset(self, capsys):
        code, _, stderr = run_cli(capsys, "train", "--preset", "imaginary")
        assert code == 2
        assert "available" in stderr

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(smoke_doc(mystery=1)))
        code, _, stderr = run_cli(capsys, "train", "--config", str(path))
        assert code == 2
        assert "mystery" in stderr

    def test_evaluate_without_checkpoints(self, tmp_path, capsys):
        code, _, stderr = run_cli(capsys, "evaluate", "--run",
                                  str(tmp_path / "empty"))
        assert code == 2

    def test_plot_missing_run(self, tmp_path, capsys):
        code, _, _ = run_cli(capsys, "plot", "--run", str(tmp_path / "none"))
        assert code == 2


class TestCliSweepAblation:
    def test_sweep_success_and_all_failed(self, tmp_path, capsys):
        code, stdout, _ = run_cli(
            capsys, "sweep", "--preset", "smoke",
            "--output-dir", str(tmp_path / "sweep_ok"),
            "--axis", "epochs", "--values", "1,2")
        assert code == 0
        doc = json.loads(stdout)
        assert [c["status"] for c in doc["cells"]] == ["ok", "ok"]

        # A cell with fewer clients than clients_per_round fails at runtime;
        # with every cell failed the command signals a runtime failure.
        code, stdout, _ = run_cli(
            capsys, "sweep", "--preset", "smoke",
            "--output-dir", str(tmp_path / "sweep_bad"),
            "--axis", "clients", "--values", "1")
        assert code == 3
        doc = json.loads(stdout)
        assert doc["cells"][0]["status"] == "failed"
        assert "clients_per_round" in doc["cells"][0]["error"]

    def test_fractional_count_values_rejected(self, tmp_path, capsys):
        code, _, stderr = run_cli(
            capsys, "sweep", "--preset", "smoke",
            "--output-dir", str(tmp_path / "sweep_frac"),
            "--axis", "epochs", "--values", "1.5")
        assert code == 2
        assert "positive integers" in stderr

    def test_ablation_grid(self, tmp_path, capsys):
        grid_dir = tmp_path / "grid"
        code, stdout, _ = run_cli(
            capsys, "ablation", "--preset", "smoke",
            "--output-dir", str(grid_dir), "--seeds", "0")
        assert code == 0
        assert "baseline" in stdout
        assert "full" in stdout
        assert (grid_dir / "ablation.csv").is_file()
