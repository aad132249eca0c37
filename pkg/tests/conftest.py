"""
Pytest configuration and fixtures.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from fogpipe.core.gaf import transform_window_set
from fogpipe.core.ingest import CHANNELS, HEADER, LabeledRecording
from fogpipe.core.model import ModelConfig
from fogpipe.core.synthetic import synthetic_windows


def make_csv(rows, header=HEADER):
    """Build recording CSV text from a header and rows of cell strings."""
    lines = [",".join(header)]
    lines += [",".join(str(cell) for cell in row) for row in rows]
    return "\n".join(lines) + "\n"


def make_labeled(label, subject_id="s1", seed=0, sample_rate_hz=64):
    """A labeled recording with random signals and the given label stream."""
    label = np.asarray(label, dtype=np.int8)
    rng = np.random.default_rng(seed)
    channels = {name: rng.standard_normal(label.shape[0]) for name in CHANNELS}
    return LabeledRecording(subject_id=subject_id, sample_rate_hz=sample_rate_hz, channels=channels, label=label)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def tiny_model_config():
    """A single-channel model on 16x16 images that trains in seconds."""
    return ModelConfig(channels=("AccV",), epochs=2, batch_size=16, image_size=16, seed=5)


@pytest.fixture
def tiny_gaf_sets():
    """Small synthetic train and validation image sets (16x16, 10 subjects)."""
    train = synthetic_windows(96, window_len=64, seed=1, split="train")
    val = synthetic_windows(32, window_len=64, seed=1, split="val")
    return transform_window_set(train, 16), transform_window_set(val, 16)
