"""
Synthetic gait data for fogpipe.

Generates recordings in the raw CSV layout and ready-made labelled window
sets with a learnable difference between the classes: no-FOG windows carry
a slow sinusoid, FOG windows carry bursts of fast oscillation.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from fogpipe.core.ingest import CHANNELS, EVENT_TRACKS, RawRecording, serialize_recording
from fogpipe.core.seeding import rng_for
from fogpipe.core.windowing import Window, WindowSet

logger = logging.getLogger(__name__)

BURST_PERIOD = 16


def _slow_wave(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n)
    phase = rng.uniform(0, 2 * np.pi)
    return rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * t / n + phase)


def _burst_wave(rng: np.random.Generator, n: int, period: int = BURST_PERIOD) -> np.ndarray:
    t = np.arange(n)
    base = 0.3 * np.sin(2 * np.pi * t / n + rng.uniform(0, 2 * np.pi))
    length = int(rng.integers(n // 2, n + 1))
    start = int(rng.integers(0, n - length + 1))
    burst = np.zeros(n)
    burst[start:start + length] = rng.uniform(0.8, 1.2) * np.sin(
        2 * np.pi * t[:length] / period + rng.uniform(0, 2 * np.pi)
    )
    return base + burst


def synthetic_windows(
    n_windows: int,
    window_len: int = 64,
    seed: int = 0,
    fog_ratio: float = 0.5,
    n_subjects: int = 10,
    noise: float = 0.1,
    split: str = "train",
    subject_prefix: str = "S",
) -> WindowSet:
    """
    Labelled, already centred windows for the two-class experiment.

    Windows are dealt round-robin to ``n_subjects`` subjects and placed on
    consecutive grid positions of each subject.
    """
    rng = rng_for(seed, "synthetic", split)
    labels = (rng.random(n_windows) < fog_ratio).astype(np.int64)
    windows = []
    for i, label in enumerate(labels):
        data = {}
        for name in CHANNELS:
            wave = _burst_wave(rng, window_len) if label else _slow_wave(rng, window_len)
            values = wave + noise * rng.standard_normal(window_len)
            data[name] = values - values.mean()
        subject = f"{subject_prefix}{i % n_subjects:02d}"
        windows.append(
            Window(
                subject_id=subject,
                start_index=(i // n_subjects) * window_len,
                data=data,
                label=int(label),
                fog_fraction=float(label),
            )
        )
    return WindowSet(windows, split=split)


def fog_runs(n_samples: int, rng: np.random.Generator, mean_run: int = 600, mean_gap: int = 1500) -> List[Tuple[int, int]]:
    """Random (start, length) FOG runs covering part of a recording."""
    runs = []
    position = int(rng.integers(0, mean_gap))
    while position < n_samples:
        length = int(rng.integers(mean_run // 2, mean_run * 3 // 2))
        runs.append((position, min(length, n_samples - position)))
        position += length + int(rng.integers(mean_gap // 2, mean_gap * 3 // 2))
    return runs


def synthetic_recording(
    subject_id: str,
    n_samples: int = 8192,
    seed: int = 0,
    sample_rate_hz: int = 128,
    runs: Optional[Sequence[Tuple[int, int]]] = None,
    missing: Optional[Sequence[Tuple[str, int, int]]] = None,
) -> RawRecording:
    """
    A raw recording with FOG runs spread over the event tracks.

    Args:
        subject_id: Subject of the session
        n_samples: Recording length
        seed: Root seed
        sample_rate_hz: Nominal rate
        runs: Explicit (start, length) FOG runs; random runs by default
        missing: (channel, start, length) stretches to blank out as missing
    """
    rng = rng_for(seed, "recording", subject_id)
    runs = list(runs) if runs is not None else fog_runs(n_samples, rng)
    t = np.arange(n_samples)
    fog = np.zeros(n_samples, dtype=bool)
    events = {name: np.zeros(n_samples, dtype=np.int8) for name in EVENT_TRACKS}
    for start, length in runs:
        fog[start:start + length] = True
        events[EVENT_TRACKS[int(rng.integers(0, len(EVENT_TRACKS)))]][start:start + length] = 1

    channels = {}
    for index, name in enumerate(CHANNELS):
        gait = np.sin(2 * np.pi * t / (sample_rate_hz * (0.9 + 0.1 * index)))
        tremor = 0.8 * np.sin(2 * np.pi * t / 20.0 + index)
        values = np.where(fog, 0.3 * gait + tremor, gait) + 0.05 * rng.standard_normal(n_samples)
        channels[name] = np.round(values, 6)
    for name, start, length in missing or ():
        channels[name][start:start + length] = np.nan

    return RawRecording(
        subject_id=subject_id,
        sample_rate_hz=sample_rate_hz,
        time_index=t.astype(np.int64),
        channels=channels,
        event_tracks=events,
    )


def write_synthetic_dataset(
    directory: Union[str, Path],
    n_subjects: int = 10,
    n_samples: int = 8192,
    seed: int = 0,
) -> List[Path]:
    """Write one CSV recording per subject into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index in range(n_subjects):
        subject = f"subject{index:02d}"
        path = directory / f"{subject}.csv"
        path.write_bytes(serialize_recording(synthetic_recording(subject, n_samples, seed)))
        paths.append(path)
    logger.info("Wrote %d synthetic recordings to %s", n_subjects, directory)
    return paths
