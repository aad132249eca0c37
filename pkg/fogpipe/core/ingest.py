"""
Recording ingestion module for fogpipe.

This module parses raw accelerometer CSV recordings, consolidates the event
annotations into a single binary FOG label, downsamples recordings and
produces subject-stratified train/validation/test splits.
"""

import io
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fogpipe.core.errors import (
    BadEventTrack,
    BadFactor,
    BadRatios,
    DataError,
    EmptyRecording,
    MissingColumn,
    RaggedRows,
    TooFewSubjects,
)

logger = logging.getLogger(__name__)

CHANNELS: Tuple[str, ...] = ("AccV", "AccML", "AccAP")
EVENT_TRACKS: Tuple[str, ...] = ("StartHesitation", "Turn", "Walking")
HEADER: Tuple[str, ...] = ("Time",) + CHANNELS + EVENT_TRACKS
DEFAULT_RATIOS: Tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class RawRecording:
    """One subject session exactly as read from disk."""

    subject_id: str
    sample_rate_hz: int
    time_index: np.ndarray
    channels: Dict[str, np.ndarray]
    event_tracks: Dict[str, np.ndarray]

    def missing(self, channel: str) -> np.ndarray:
        """Boolean mask of missing samples for a channel."""
        return np.isnan(self.channels[channel])

    def __len__(self) -> int:
        return int(self.time_index.shape[0])


@dataclass
class LabeledRecording:
    """A recording with the unified FOG label (1 = FOG, 0 = no-FOG)."""

    subject_id: str
    sample_rate_hz: int
    channels: Dict[str, np.ndarray]
    label: np.ndarray

    def missing(self, channel: str) -> np.ndarray:
        """Boolean mask of missing samples for a channel."""
        return np.isnan(self.channels[channel])

    def __len__(self) -> int:
        return int(self.label.shape[0])


@dataclass(frozen=True)
class SubjectSplit:
    """Disjoint train/validation/test subject sets for one repetition."""

    train_subjects: FrozenSet[str]
    val_subjects: FrozenSet[str]
    test_subjects: FrozenSet[str]
    seed: int
    repetition_index: int = 0

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train_subjects), len(self.val_subjects), len(self.test_subjects)

    def split_of(self, subject_id: str) -> Optional[str]:
        """Name of the split holding a subject ("train", "val", "test"), or None."""
        if subject_id in self.train_subjects:
            return "train"
        if subject_id in self.val_subjects:
            return "val"
        if subject_id in self.test_subjects:
            return "test"
        return None

    def to_dict(self) -> Dict[str, object]:
        return {
            "train_subjects": sorted(self.train_subjects),
            "val_subjects": sorted(self.val_subjects),
            "test_subjects": sorted(self.test_subjects),
            "seed": self.seed,
            "repetition_index": self.repetition_index,
        }


def parse_recording(
    csv_bytes: Union[bytes, str],
    subject_id: str = "unknown",
    sample_rate_hz: int = 128,
) -> RawRecording:
    """
    Parse one recording CSV.

    Args:
        csv_bytes: UTF-8 CSV content with the standard header
        subject_id: Subject the session belongs to
        sample_rate_hz: Sampling rate of the file

    Returns:
        The parsed recording; empty numeric cells become NaN and are reported
        through ``RawRecording.missing``.

    Raises:
        MissingColumn: If the header lacks a required column
        RaggedRows: If a data row has a different number of fields than the header
        EmptyRecording: If there are no data rows
        BadEventTrack: If an event cell is not 0 or 1
        DataError: If the file is not UTF-8 or a cell is not numeric
    """
    try:
        text = csv_bytes.decode("utf-8") if isinstance(csv_bytes, bytes) else csv_bytes
    except UnicodeDecodeError as e:
        raise DataError(f"recording {subject_id!r} is not UTF-8 text") from e
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise MissingColumn("recording has no header")

    header = [name.strip() for name in lines[0].split(",")]
    absent = [name for name in HEADER if name not in header]
    if absent:
        raise MissingColumn(f"header lacks column(s): {', '.join(absent)}")

    width = len(header)
    for row_number, line in enumerate(lines[1:], start=1):
        fields = line.count(",") + 1
        if fields != width:
            raise RaggedRows(f"row {row_number} has {fields} fields, header has {width}")
    if len(lines) == 1:
        raise EmptyRecording(f"recording {subject_id!r} has no data rows")

    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(lines)),
            dtype="float64",
            float_precision="round_trip",
            skipinitialspace=True,
        )
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"recording {subject_id!r} has a non-numeric cell: {e}") from e
    frame.columns = [str(name).strip() for name in frame.columns]

    events: Dict[str, np.ndarray] = {}
    for name in EVENT_TRACKS:
        values = frame[name].to_numpy()
        if np.isnan(values).any() or not np.isin(values, (0.0, 1.0)).all():
            raise BadEventTrack(f"event track {name} must contain only 0/1")
        events[name] = values.astype(np.int8)

    channels = {name: frame[name].to_numpy(dtype=np.float64, copy=True) for name in CHANNELS}
    time_values = frame["Time"].to_numpy()
    time_index = (
        time_values.astype(np.int64)
        if not np.isnan(time_values).any()
        else np.arange(len(frame), dtype=np.int64)
    )

    recording = RawRecording(
        subject_id=subject_id,
        sample_rate_hz=sample_rate_hz,
        time_index=time_index,
        channels=channels,
        event_tracks=events,
    )
    missing = {name: int(recording.missing(name).sum()) for name in CHANNELS}
    logger.debug("Parsed %s: %d samples, missing %s", subject_id, len(recording), missing)
    return recording


def serialize_recording(rec: RawRecording) -> bytes:
    """
    Write a recording back to the canonical CSV layout.

    Floats are written in shortest round-trip notation so parsing the
    output reproduces every finite value bit-exactly; missing samples
    become empty cells.
    """
    frame = pd.DataFrame({"Time": rec.time_index.astype(np.int64)})
    for name in CHANNELS:
        frame[name] = rec.channels[name]
    for name in EVENT_TRACKS:
        frame[name] = rec.event_tracks[name].astype(np.int64)
    return frame.to_csv(index=False, na_rep="", lineterminator="\n").encode("utf-8")


def load_subject_map(metadata_csv: Union[str, Path]) -> Dict[str, str]:
    """
    Load a session-to-subject map from a metadata CSV with ``Id`` and ``Subject`` columns.

    Returns:
        Dictionary mapping file stems to subject ids
    """
    try:
        frame = pd.read_csv(metadata_csv, dtype=str)
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"malformed metadata file {metadata_csv}: {e}") from e
    for name in ("Id", "Subject"):
        if name not in frame.columns:
            raise MissingColumn(f"metadata file lacks column {name}")
    return dict(zip(frame["Id"].str.strip(), frame["Subject"].str.strip()))


def load_recording(
    path: Union[str, Path],
    sample_rate_hz: int = 128,
    subject_map: Optional[Mapping[str, str]] = None,
) -> RawRecording:
    """
    Read a recording file; the subject id is the file stem unless the
    subject map says otherwise.
    """
    path = Path(path)
    subject_id = path.stem
    if subject_map is not None:
        subject_id = subject_map.get(path.stem, path.stem)
    return parse_recording(path.read_bytes(), subject_id=subject_id, sample_rate_hz=sample_rate_hz)


def consolidate_labels(rec: RawRecording) -> LabeledRecording:
    """
    Merge the three event tracks into one FOG label.

    The label is 1 wherever any event track is 1.
    """
    tracks = np.stack([rec.event_tracks[name] for name in EVENT_TRACKS])
    label = tracks.any(axis=0).astype(np.int8)
    return LabeledRecording(
        subject_id=rec.subject_id,
        sample_rate_hz=rec.sample_rate_hz,
        channels={name: values.copy() for name, values in rec.channels.items()},
        label=label,
    )


def downsample(rec: LabeledRecording, factor: int = 2) -> LabeledRecording:
    """
    Keep every ``factor``-th sample of the signals and labels.

    Args:
        rec: Labeled recording
        factor: Decimation factor; the sample rate must be divisible by it

    Returns:
        Decimated recording of length ``ceil(len / factor)``

    Raises:
        BadFactor: If the factor is not positive or does not divide the rate
    """
    if factor < 1 or rec.sample_rate_hz % factor != 0:
        raise BadFactor(f"cannot downsample {rec.sample_rate_hz} Hz by factor {factor}")
    if factor == 1:
        return rec
    return LabeledRecording(
        subject_id=rec.subject_id,
        sample_rate_hz=rec.sample_rate_hz // factor,
        channels={name: values[::factor].copy() for name, values in rec.channels.items()},
        label=rec.label[::factor].copy(),
    )


def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    quotas = [Fraction(ratio).limit_denominator(10**6) * total for ratio in ratios]
    sizes = [math.floor(quota) for quota in quotas]
    remainder = total - sum(sizes)
    # larger fractional part first, earlier split wins ties
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def split_subjects(
    registry: Iterable[str],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    repetition_index: int = 0,
) -> SubjectSplit:
    """
    Partition subjects into train/validation/test sets.

    The registry is sorted, shuffled with a generator seeded by ``seed`` and
    cut into consecutive blocks sized by largest-remainder rounding of the
    ratios.

    Raises:
        TooFewSubjects: With fewer than three subjects
        BadRatios: If the ratios are not three non-negative values summing to 1
    """
    subjects = sorted(set(registry))
    if len(subjects) < 3:
        raise TooFewSubjects(f"need at least 3 subjects, got {len(subjects)}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"split ratios must be three non-negative values summing to 1, got {list(ratios)}")

    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n_train, n_val, _ = _largest_remainder(len(subjects), ratios)

    return SubjectSplit(
        train_subjects=frozenset(shuffled[:n_train]),
        val_subjects=frozenset(shuffled[n_train:n_train + n_val]),
        test_subjects=frozenset(shuffled[n_train + n_val:]),
        seed=seed,
        repetition_index=repetition_index,
    )


def repetition_splits(
    registry: Iterable[str],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    repetitions: int = 3,
) -> List[SubjectSplit]:
    """Splits for repeated experiments, seeded ``seed, seed + 1, ...``."""
    subjects = list(registry)
    return [
        split_subjects(subjects, ratios, seed=seed + index, repetition_index=index)
        for index in range(repetitions)
    ]
