"""
Unit tests for the configuration manager module.
"""

import logging
import os
import tempfile
from pathlib import Path
from unittest import mock

import pytest
import yaml

from fogpipe.core.config_manager import (
    DEFAULT_CONFIG,
    THREADS_ENV,
    ConfigManager,
    LoggingConfig,
    configure_logging,
    load_run_config,
    thread_count,
)
from fogpipe.core.errors import BadConfig, BadRatios, ConfigError


class TestConfigManager:
    """Test cases for the ConfigManager class."""

    def setup_method(self):
        """Set up test environment before each test."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.config_dir = Path(self.temp_dir.name)

    def teardown_method(self):
        """Clean up test environment after each test."""
        self.temp_dir.cleanup()

    def write_config(self, data, name="fog.yaml"):
        path = self.config_dir / name
        with open(path, "w") as f:
            yaml.dump(data, f)
        return path

    def test_defaults(self):
        """Test the built-in defaults."""
        cfg = ConfigManager().run_config()

        assert cfg.seed == 42
        assert cfg.repetitions == 3
        assert cfg.windowing.window_len == 256
        assert cfg.windowing.eval_labeling == "majority"
        assert cfg.gaf.image_size == 64
        assert cfg.ingest.split_ratios == (0.7, 0.1, 0.2)
        assert cfg.model.channel_sets[-1] == ("AccV", "AccML", "AccAP")
        assert cfg.federated.num_clients == 5
        assert cfg.logging.file is None

    def test_file_overrides_defaults(self):
        """Test that file values win over defaults and keep sibling keys."""
        path = self.write_config({"windowing": {"window_len": 128}, "gaf": {"image_size": 32}})
        manager = ConfigManager(path)

        assert manager.get_config_value("windowing.window_len") == 128
        assert manager.get_config_value("windowing.fog_overlap") == 0.5
        assert manager.run_config().gaf.image_size == 32

    def test_overrides_win(self):
        """Test that explicit overrides win over the file."""
        path = self.write_config({"seed": 1, "paths": {"out_dir": "a"}})
        cfg = ConfigManager(path, {"seed": 7, "paths": {"out_dir": "b"}}).run_config()

        assert cfg.seed == 7
        assert cfg.paths.out_dir == Path("b")
        assert cfg.paths.data_dir == Path("data")

    def test_get_config_value_missing(self):
        """Test the default for unknown keys."""
        manager = ConfigManager()
        assert manager.get_config_value("nonexistent.key", "x") == "x"
        assert manager.get_config_value("seed.deeper") is None

    def test_defaults_not_mutated(self):
        """Test that merging never changes the module defaults."""
        ConfigManager(overrides={"windowing": {"window_len": 64}})
        assert DEFAULT_CONFIG["windowing"]["window_len"] == 256

    def test_missing_file(self):
        """Test that a missing configuration file is a configuration error."""
        with pytest.raises(BadConfig):
            ConfigManager(self.config_dir / "nope.yaml")

    def test_invalid_yaml(self):
        """Test that malformed YAML is rejected."""
        path = self.config_dir / "bad.yaml"
        path.write_text("windowing: [unclosed\n")
        with pytest.raises(BadConfig):
            ConfigManager(path)

    def test_not_a_mapping(self):
        """Test that a YAML list is rejected."""
        path = self.config_dir / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(BadConfig):
            ConfigManager(path)

    def test_unknown_section(self):
        """Test that unknown sections are reported."""
        with pytest.raises(BadConfig):
            ConfigManager(self.write_config({"webserver": {"port": 80}}))

    def test_unknown_key(self):
        """Test that unknown keys inside a section are reported."""
        manager = ConfigManager(self.write_config({"gaf": {"colour": "red"}}))
        with pytest.raises(BadConfig):
            manager.run_config()

    def test_dump_round_trip(self):
        """Test that the dumped YAML loads back to the same configuration."""
        manager = ConfigManager(overrides={"seed": 3})
        assert yaml.safe_load(manager.dump()) == manager.config


class TestValidation:
    """Test cases for run configuration validation."""

    @pytest.mark.parametrize(
        "overrides",
        [
            {"repetitions": 0},
            {"windowing": {"window_len": 255}},
            {"windowing": {"eval_labeling": "loose"}},
            {"gaf": {"image_size": 12}},
            {"gaf": {"image_size": 64}, "windowing": {"window_len": 96}},
            {"gaf": {"angle_source": "radial"}},
            {"model": {"channel_sets": [["AccX"]]}},
            {"model": {"batch_size": 1}},
            {"federated": {"rounds": 0}},
            {"ingest": {"downsample_factor": 3}},
            {"evaluation": {"max_missing_fraction": 1.5}},
        ],
    )
    def test_invalid_settings(self, overrides):
        """Test that invalid settings raise configuration errors."""
        with pytest.raises(ConfigError) as info:
            load_run_config(overrides=overrides)
        assert info.value.exit_code == 1

    def test_bad_ratios(self):
        """Test that split ratios must sum to one."""
        with pytest.raises(BadRatios):
            load_run_config(overrides={"ingest": {"split_ratios": [0.5, 0.5, 0.5]}})

    def test_required_path(self):
        """Test that required paths must exist."""
        cfg = load_run_config(overrides={"paths": {"data_dir": "/definitely/not/here"}})
        with pytest.raises(BadConfig):
            cfg.validate(require_paths=("data_dir",))


class TestEnvironmentAndLogging:
    """Test cases for thread count and logging setup."""

    def test_thread_count_default(self):
        """Test one thread when the variable is unset."""
        with mock.patch.dict(os.environ, {}, clear=True):
            assert thread_count() == 1

    def test_thread_count_set(self):
        """Test reading the thread count."""
        with mock.patch.dict(os.environ, {THREADS_ENV: "4"}):
            assert thread_count() == 4

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_thread_count_invalid(self, raw):
        """Test that invalid thread counts are configuration errors."""
        with mock.patch.dict(os.environ, {THREADS_ENV: raw}):
            with pytest.raises(BadConfig):
                thread_count()

    def test_configure_logging_file(self, temp_dir):
        """Test that a log file receives timestamped records."""
        path = temp_dir / "logs" / "run.log"
        logger = configure_logging(LoggingConfig(level="DEBUG", file=path))
        try:
            logging.getLogger("fogpipe.test").debug("hello")
            for handler in logger.handlers:
                handler.flush()
            text = path.read_text()
            assert "DEBUG fogpipe.test: hello" in text
            assert logger.level == logging.DEBUG
        finally:
            for handler in list(logger.handlers):
                if isinstance(handler, logging.FileHandler):
                    logger.removeHandler(handler)
                    handler.close()
            logger.setLevel(logging.NOTSET)

    def test_configure_logging_bad_level(self):
        """Test that unknown levels are rejected."""
        with pytest.raises(ConfigError):
            configure_logging(LoggingConfig(level="CHATTY"))
