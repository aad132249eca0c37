"""
Unit tests for the command-line interface module.
"""

from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from fogpipe.core.archive import read_manifest
from fogpipe.core.cli import main
from fogpipe.core.evaluation import ChannelRanking
from fogpipe.core.model import load_model
from fogpipe.core.synthetic import write_synthetic_dataset

SMALL_CONFIG = {
    "seed": 3,
    "repetitions": 1,
    "windowing": {"window_len": 64},
    "gaf": {"image_size": 16},
    "model": {"channel_sets": [["AccV"], ["AccML"], ["AccAP"]], "epochs": 1, "batch_size": 32},
    "federated": {"num_clients": 2, "local_epochs": 1, "rounds": 1, "channels": ["AccV"]},
    "evaluation": {"top_k": 5},
}


def invoke(config_path, *args):
    return CliRunner().invoke(main, ["--config", str(config_path), *args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Preprocess, train, federate and evaluate a small synthetic cohort once."""
    root = tmp_path_factory.mktemp("cli")
    write_synthetic_dataset(root / "data", n_subjects=10, n_samples=4096, seed=0)
    config = dict(SMALL_CONFIG, paths={"data_dir": str(root / "data"), "out_dir": str(root / "out")})
    config_path = root / "fog.yaml"
    config_path.write_text(yaml.safe_dump(config))

    results = {}
    for command in ("preprocess", "train", "federate", "evaluate"):
        results[command] = invoke(config_path, command)
        assert results[command].exit_code == 0, results[command].output
    return root, config_path, results


class TestPipelineCommands:
    """Test cases for the pipeline stages."""

    def test_preprocess_outputs(self, pipeline):
        """Test archives, split file and class counts."""
        root, _, results = pipeline
        rep = root / "out" / "rep0"

        for split in ("train", "val", "test"):
            assert (rep / "windows" / split / "manifest.csv").exists()
            assert (rep / "gaf" / split / "gaf.bin").exists()
        split = yaml.safe_load((rep / "split.yaml").read_text())
        assert split["seed"] == 3
        counts = pd.read_csv(root / "out" / "class_counts.csv")
        assert counts["split"].tolist() == ["train", "val", "test"]
        assert counts.loc[0, "n_fog"] > 0
        assert "with hopping" in results["preprocess"].output

    def test_train_outputs(self, pipeline):
        """Test model files, histories and timing."""
        root, _, _ = pipeline
        models = root / "out" / "rep0" / "models"

        for name in ("AccV", "AccML", "AccAP"):
            assert (models / f"{name}.fogw").exists()
            history = pd.read_csv(models / f"{name}_history.csv")
            assert history["epoch"].tolist() == [0]
        timing = pd.read_csv(models / "timing.csv")
        assert timing["channels"].tolist() == ["AccV", "AccML", "AccAP"]

    def test_federate_outputs(self, pipeline):
        """Test the global model and the round history."""
        root, _, _ = pipeline
        fed = root / "out" / "rep0" / "federated"

        model = load_model(fed / "global.fogw")
        assert model.metadata["federated"] == {"rounds": 1, "local_epochs": 1, "clients": 2}
        assert len(pd.read_csv(fed / "round_history.csv")) == 2
        assert sorted(yaml.safe_load((fed / "shards.yaml").read_text())) == [0, 1]

    def test_evaluate_outputs(self, pipeline):
        """Test reports, stored test F1 and the channel ranking."""
        root, _, _ = pipeline
        out = root / "out"

        for name in ("window_reports.csv", "episode_reports.csv", "summary.csv", "summary.txt"):
            assert (out / "reports" / name).exists()
        window_reports = pd.read_csv(out / "reports" / "window_reports.csv")
        assert len(window_reports) == 4
        assert "rep0/federated/global" in window_reports["name"].tolist()

        ranking = ChannelRanking.from_csv((out / "rep0" / "ranking.csv").read_text(), out / "rep0")
        assert sorted(ranking.channels) == ["AccAP", "AccML", "AccV"]
        scores = [entry.test_f1 for entry in ranking]
        assert scores == sorted(scores, reverse=True)
        assert all(Path(entry.model).parent.name == "models" for entry in ranking)
        assert load_model(out / "rep0" / "models" / "AccV.fogw").test_f1 is not None

    def test_preprocess_rerun_identical(self, pipeline, tmp_path):
        """Test that preprocessing twice gives byte-identical archives."""
        root, config_path, _ = pipeline
        result = invoke(config_path, "--out", str(tmp_path), "preprocess")
        assert result.exit_code == 0, result.output

        for sub in ("windows/train/manifest.csv", "windows/test/windows.bin", "gaf/val/gaf.bin"):
            assert (tmp_path / "rep0" / sub).read_bytes() == (root / "out" / "rep0" / sub).read_bytes()

    def test_bad_repetition(self, pipeline):
        """Test that an out-of-range repetition is a configuration error."""
        _, config_path, _ = pipeline
        result = invoke(config_path, "train", "--repetition", "5")
        assert result.exit_code == 1
        assert "Error:" in result.output


class TestInferAndExport:
    """Test cases for inference and image export."""

    def write_window(self, path, nan_columns=(), columns=("AccV", "AccML", "AccAP")):
        rng = np.random.default_rng(0)
        frame = pd.DataFrame({name: rng.standard_normal(64) for name in columns})
        for name in nan_columns:
            frame[name] = np.nan
        frame.to_csv(path, index=False)
        return path

    def test_infer(self, pipeline, tmp_path):
        """Test that the best functional channel answers."""
        root, config_path, _ = pipeline
        ranking = ChannelRanking.from_csv((root / "out" / "rep0" / "ranking.csv").read_text())
        window = self.write_window(tmp_path / "w.csv", nan_columns=[ranking.channels[0]])
        result = invoke(config_path, "infer", str(window))

        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[-2] in ("prediction=0", "prediction=1")
        assert lines[-1] == f"channel_used={ranking.channels[1]}"

    def test_infer_all_channels_missing(self, pipeline, tmp_path):
        """Test exit code 3 when no channel is functional."""
        _, config_path, _ = pipeline
        window = self.write_window(tmp_path / "w.csv", nan_columns=["AccV", "AccML", "AccAP"])
        result = invoke(config_path, "infer", str(window))
        assert result.exit_code == 3

    def test_infer_missing_column(self, pipeline, tmp_path):
        """Test exit code 2 for a malformed window file."""
        _, config_path, _ = pipeline
        window = self.write_window(tmp_path / "w.csv", columns=("AccV", "AccML"))
        result = invoke(config_path, "infer", str(window))
        assert result.exit_code == 2

    def test_infer_non_numeric_window(self, pipeline, tmp_path):
        """Test exit code 2 for a window file with a text sample."""
        _, config_path, _ = pipeline
        window = tmp_path / "w.csv"
        window.write_text("AccV,AccML,AccAP\nabc,1.0,2.0\n")
        result = invoke(config_path, "infer", str(window))

        assert result.exit_code == 2
        assert "Error:" in result.output

    def test_infer_malformed_ranking(self, pipeline, tmp_path):
        """Test exit code 2 for a ranking file without a rank column."""
        _, config_path, _ = pipeline
        window = self.write_window(tmp_path / "w.csv")
        ranking = tmp_path / "ranking.csv"
        ranking.write_text("channel,model_path,test_f1\nAccV,models/AccV.fogw,0.9\n")
        result = invoke(config_path, "infer", str(window), "--ranking", str(ranking))

        assert result.exit_code == 2
        assert "rank" in result.output

    def test_infer_unreadable_model(self, pipeline, tmp_path):
        """Test that a file system error while loading a model exits with code 2."""
        _, config_path, _ = pipeline
        window = self.write_window(tmp_path / "w.csv")
        (tmp_path / "models" / "AccV.fogw").mkdir(parents=True)
        ranking = tmp_path / "ranking.csv"
        ranking.write_text("rank,channel,model_path,test_f1\n1,AccV,models/AccV.fogw,0.9\n")
        result = invoke(config_path, "infer", str(window), "--ranking", str(ranking))

        assert result.exit_code == 2
        assert "Error:" in result.output

    def test_gaf_export(self, pipeline):
        """Test PNG files and the difference table."""
        root, config_path, _ = pipeline
        manifest = read_manifest(root / "out" / "rep0" / "windows" / "test")
        (s1, t1), (s2, t2) = list(zip(manifest["subject_id"], manifest["start_index"]))[:2]
        result = invoke(config_path, "gaf-export", f"{s1}@{t1}", "--channel", "AccV", "--diff-against", f"{s2}@{t2}")

        assert result.exit_code == 0, result.output
        out = root / "out" / "gaf_png"
        with Image.open(out / f"{s1}_{t1}_AccV.png") as img:
            assert img.mode == "L" and img.size == (16, 16)
        assert (out / f"{s1}_{t1}_vs_{s2}_{t2}_AccV_diff.png").exists()
        top = pd.read_csv(out / f"{s1}_{t1}_vs_{s2}_{t2}_AccV_top5.csv")
        assert list(top.columns) == ["i", "j", "abs_diff"] and len(top) == 5

    def test_gaf_export_bad_key(self, pipeline):
        """Test that malformed or unknown keys are rejected."""
        _, config_path, _ = pipeline
        assert invoke(config_path, "gaf-export", "no-start").exit_code == 1
        assert invoke(config_path, "gaf-export", "nobody@0").exit_code == 2


class TestErrorsAndConfig:
    """Test cases for error reporting and the config commands."""

    def setup_method(self):
        """Set up test environment before each test."""
        self.runner = CliRunner()

    def test_missing_config_file(self, temp_dir):
        """Test exit code 1 for a missing configuration file."""
        result = self.runner.invoke(main, ["--config", str(temp_dir / "nope.yaml"), "config", "show"])
        assert result.exit_code == 1
        assert "Error:" in result.output

    def test_empty_data_dir(self, temp_dir):
        """Test exit code 2 when there are no recordings."""
        (temp_dir / "data").mkdir()
        config_path = temp_dir / "fog.yaml"
        config_path.write_text(yaml.safe_dump({"paths": {"data_dir": str(temp_dir / "data")}}))
        result = self.runner.invoke(main, ["--config", str(config_path), "--out", str(temp_dir / "out"), "preprocess"])
        assert result.exit_code == 2

    def test_missing_data_dir(self, temp_dir):
        """Test exit code 1 when the data directory does not exist."""
        config_path = temp_dir / "fog.yaml"
        config_path.write_text(yaml.safe_dump({"paths": {"data_dir": str(temp_dir / "absent")}}))
        assert self.runner.invoke(main, ["--config", str(config_path), "preprocess"]).exit_code == 1

    def test_config_show(self):
        """Test that overrides appear in the printed configuration."""
        result = self.runner.invoke(main, ["--seed", "11", "config", "show"])
        assert result.exit_code == 0
        assert yaml.safe_load(result.output)["seed"] == 11

    def test_config_get(self):
        """Test reading single values."""
        result = self.runner.invoke(main, ["config", "get", "windowing.window_len"])
        assert result.exit_code == 0
        assert result.output.strip() == "256"

    def test_config_get_missing(self):
        """Test the message for an unknown key."""
        result = self.runner.invoke(main, ["config", "get", "nonexistent.key"])
        assert result.exit_code == 1
        assert "not found" in result.output

    def test_thread_variable_is_validated(self, temp_dir):
        """Test that a bad thread count stops preprocessing with exit code 1."""
        write_synthetic_dataset(temp_dir / "data", n_subjects=3, n_samples=512)
        config_path = temp_dir / "fog.yaml"
        config_path.write_text(yaml.safe_dump({"paths": {"data_dir": str(temp_dir / "data")}}))
        with mock.patch.dict("os.environ", {"FOG_PIPELINE_THREADS": "none"}):
            result = self.runner.invoke(main, ["--config", str(config_path), "preprocess"])
        assert result.exit_code == 1
