"""
Configuration management module for fogpipe.

This module loads the run configuration from a YAML file, merges it over
the built-in defaults and command-line overrides, validates it and sets up
logging.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from fogpipe.core.errors import BadConfig, BadRatios, ConfigError
from fogpipe.core.gaf import ANGLE_SOURCES
from fogpipe.core.ingest import CHANNELS

logger = logging.getLogger(__name__)

THREADS_ENV = "FOG_PIPELINE_THREADS"

DEFAULT_CONFIG: Dict[str, Any] = {
    "paths": {"data_dir": "data", "out_dir": "out", "metadata_csv": None},
    "seed": 42,
    "repetitions": 3,
    "ingest": {"input_rate_hz": 128, "downsample_factor": 2, "split_ratios": [0.7, 0.1, 0.2]},
    "windowing": {"window_len": 256, "fog_overlap": 0.5, "nofog_overlap": 0.0, "eval_labeling": "majority"},
    "gaf": {"image_size": 64, "angle_source": "bipolar"},
    "model": {
        "channel_sets": [["AccV"], ["AccML"], ["AccAP"], ["AccV", "AccML", "AccAP"]],
        "epochs": 60,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "l2_lambda": 0.001,
    },
    "federated": {"num_clients": 5, "local_epochs": 2, "rounds": 30, "channels": ["AccV", "AccML", "AccAP"]},
    "evaluation": {"max_missing_fraction": 0.0, "top_k": 15},
    "logging": {"level": "INFO", "file": None},
}


@dataclass
class PathsConfig:
    data_dir: Path = Path("data")
    out_dir: Path = Path("out")
    metadata_csv: Optional[Path] = None


@dataclass
class IngestConfig:
    input_rate_hz: int = 128
    downsample_factor: int = 2
    split_ratios: Tuple[float, ...] = (0.7, 0.1, 0.2)


@dataclass
class WindowingConfig:
    window_len: int = 256
    fog_overlap: float = 0.5
    nofog_overlap: float = 0.0
    eval_labeling: str = "majority"


@dataclass
class GafConfig:
    image_size: int = 64
    angle_source: str = "bipolar"


@dataclass
class TrainingConfig:
    channel_sets: List[Tuple[str, ...]] = field(default_factory=list)
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    l2_lambda: float = 0.001


@dataclass
class FederatedConfig:
    num_clients: int = 5
    local_epochs: int = 2
    rounds: int = 30
    channels: Tuple[str, ...] = CHANNELS


@dataclass
class EvaluationConfig:
    max_missing_fraction: float = 0.0
    top_k: int = 15


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file: Optional[Path] = None


@dataclass
class RunConfig:
    """Typed view of the merged configuration."""

    paths: PathsConfig
    seed: int
    repetitions: int
    ingest: IngestConfig
    windowing: WindowingConfig
    gaf: GafConfig
    model: TrainingConfig
    federated: FederatedConfig
    evaluation: EvaluationConfig
    logging: LoggingConfig

    def validate(self, require_paths: Tuple[str, ...] = ()) -> None:
        """
        Check the configuration.

        Args:
            require_paths: Names of ``paths`` entries that must exist on disk

        Raises:
            ConfigError: On any invalid or inconsistent setting
        """
        for name in require_paths:
            path = getattr(self.paths, name)
            if path is None or not Path(path).exists():
                raise BadConfig(f"paths.{name} does not exist: {path}")
        if self.repetitions < 1:
            raise BadConfig(f"repetitions must be >= 1, got {self.repetitions}")
        ratios = self.ingest.split_ratios
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise BadRatios(f"split_ratios must be three non-negative values summing to 1, got {list(ratios)}")
        if self.ingest.downsample_factor < 1 or self.ingest.input_rate_hz % self.ingest.downsample_factor:
            raise BadConfig("downsample_factor must divide input_rate_hz")
        w = self.windowing
        if w.window_len < 2 or w.window_len % 2:
            raise BadConfig(f"window_len must be even, got {w.window_len}")
        if w.eval_labeling not in ("strict", "majority"):
            raise BadConfig(f"eval_labeling must be strict or majority, got {w.eval_labeling!r}")
        if self.gaf.image_size < 8 or self.gaf.image_size % 8 or w.window_len % self.gaf.image_size:
            raise BadConfig(
                f"image_size must be a multiple of 8 dividing window_len, got {self.gaf.image_size}/{w.window_len}"
            )
        if self.gaf.angle_source not in ANGLE_SOURCES:
            raise BadConfig(f"angle_source must be one of {ANGLE_SOURCES}")
        for channels in list(self.model.channel_sets) + [self.federated.channels]:
            unknown = [c for c in channels if c not in CHANNELS]
            if not channels or unknown or len(set(channels)) != len(channels):
                raise BadConfig(f"invalid channel set {list(channels)}")
        if self.model.epochs < 0 or self.model.batch_size < 2:
            raise BadConfig("model.epochs >= 0 and model.batch_size >= 2 required")
        if self.federated.num_clients < 1:
            raise BadConfig(f"federated.num_clients must be >= 1, got {self.federated.num_clients}")
        if self.federated.rounds < 1 or self.federated.local_epochs < 0:
            raise BadConfig("federated.rounds >= 1 and federated.local_epochs >= 0 required")
        if not 0.0 <= self.evaluation.max_missing_fraction <= 1.0:
            raise BadConfig("evaluation.max_missing_fraction must be in [0, 1]")


class ConfigManager:
    """
    Builds the effective run configuration.

    Values come from the built-in defaults, then the YAML file, then
    explicit overrides such as ``--seed`` and ``--out``; later sources win.
    """

    def __init__(
        self,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ):
        """
        Initialize the configuration manager.

        Args:
            config_path: Optional YAML configuration file
            overrides: Nested dictionary applied last
        """
        self.config_path = Path(config_path) if config_path is not None else None
        self.config = copy.deepcopy(DEFAULT_CONFIG)

        if self.config_path is not None:
            self._merge_config(self.config, self._load_config(self.config_path))
        if overrides:
            self._merge_config(self.config, overrides)

    @staticmethod
    def _load_config(path: Path) -> Dict[str, Any]:
        """
        Load configuration from a YAML file.

        Raises:
            BadConfig: If the file is missing, unreadable or not a mapping
        """
        if not path.exists():
            raise BadConfig(f"configuration file not found: {path}")
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise BadConfig(f"invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise BadConfig(f"{path} must contain a mapping")
        unknown = sorted(set(data) - set(DEFAULT_CONFIG))
        if unknown:
            raise BadConfig(f"unknown configuration section(s): {', '.join(unknown)}")
        return data

    def _merge_config(self, base: Dict[str, Any], override: Dict[str, Any]) -> None:
        """
        Merge override configuration into base configuration.

        Args:
            base: Base configuration dictionary (modified in-place)
            override: Override configuration dictionary
        """
        for key, value in override.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                self._merge_config(base[key], value)
            else:
                base[key] = value

    def get_config_value(self, key_path: str, default: Any = None) -> Any:
        """
        Get a specific configuration value using dot notation.

        Args:
            key_path: Path to the value (e.g., "windowing.window_len")
            default: Default value to return if the key doesn't exist
        """
        value: Any = self.config
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def run_config(self) -> RunConfig:
        """
        Materialise the merged dictionary as a ``RunConfig``.

        Raises:
            BadConfig: If a section has unknown keys or wrongly typed values
        """
        c = self.config
        try:
            paths = c["paths"]
            return RunConfig(
                paths=PathsConfig(
                    data_dir=Path(paths["data_dir"]),
                    out_dir=Path(paths["out_dir"]),
                    metadata_csv=Path(paths["metadata_csv"]) if paths.get("metadata_csv") else None,
                ),
                seed=int(c["seed"]),
                repetitions=int(c["repetitions"]),
                ingest=IngestConfig(**{**c["ingest"], "split_ratios": tuple(c["ingest"]["split_ratios"])}),
                windowing=WindowingConfig(**c["windowing"]),
                gaf=GafConfig(**c["gaf"]),
                model=TrainingConfig(
                    **{**c["model"], "channel_sets": [tuple(s) for s in c["model"]["channel_sets"]]}
                ),
                federated=FederatedConfig(**{**c["federated"], "channels": tuple(c["federated"]["channels"])}),
                evaluation=EvaluationConfig(**c["evaluation"]),
                logging=LoggingConfig(
                    level=str(c["logging"]["level"]).upper(),
                    file=Path(c["logging"]["file"]).expanduser() if c["logging"].get("file") else None,
                ),
            )
        except (TypeError, ValueError, KeyError) as e:
            raise BadConfig(f"invalid configuration: {e}") from e

    def dump(self) -> str:
        """The effective configuration as YAML."""
        return yaml.safe_dump(self.config, default_flow_style=False, sort_keys=True)


def load_run_config(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    cfg = ConfigManager(config_path, overrides).run_config()
    cfg.validate()
    return cfg


def thread_count() -> int:
    """
    Worker threads for data-parallel work, from ``FOG_PIPELINE_THREADS``.

    Raises:
        BadConfig: If the variable is set but not a positive integer
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise BadConfig(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise BadConfig(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def configure_logging(cfg: LoggingConfig) -> logging.Logger:
    """
    Set the package log level and attach a file handler if configured.

    Only the file handler writes timestamps.
    """
    package_logger = logging.getLogger("fogpipe")
    level = getattr(logging, cfg.level, None)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {cfg.level!r}")
    package_logger.setLevel(level)
    if cfg.file is not None:
        target = str(Path(cfg.file).resolve())
        existing = [
            h for h in package_logger.handlers
            if isinstance(h, logging.FileHandler) and h.baseFilename == target
        ]
        if not existing:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
            handler = logging.FileHandler(target)
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            package_logger.addHandler(handler)
    return package_logger
