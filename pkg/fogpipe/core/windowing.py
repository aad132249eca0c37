"""
Window segmentation module for fogpipe.

Recordings are cut into fixed-length windows with per-class hopping: FOG
stretches are sampled with 50% overlap, no-FOG stretches without overlap.
Windows that are neither clearly FOG nor clean no-FOG are dropped, and each
kept window is mean-centred per channel.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from fogpipe.core.errors import BadLength, RecordingTooShort
from fogpipe.core.ingest import CHANNELS, LabeledRecording

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_LEN = 256


@dataclass
class Window:
    """
    A fixed-length multichannel segment of one recording.

    Training windows are pure: label 1 means fog_fraction > 0.5 and label 0
    means fog_fraction == 0. Majority-labeled evaluation windows relax the
    second rule to fog_fraction < 0.5.
    """

    subject_id: str
    start_index: int
    data: Dict[str, np.ndarray]
    label: int
    fog_fraction: float
    channel_mask: Dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.channel_mask:
            self.channel_mask = {name: not np.isnan(values).any() for name, values in self.data.items()}

    @property
    def key(self) -> Tuple[str, int]:
        return self.subject_id, self.start_index

    @property
    def length(self) -> int:
        return int(next(iter(self.data.values())).shape[0])

    def missing_fraction(self, channel: str) -> float:
        return float(np.isnan(self.data[channel]).mean())

    def is_functional(self, channel: str, max_missing_fraction: float = 0.0) -> bool:
        """
        Whether a channel can be used for this window.

        With the default threshold a single missing sample makes the channel
        non-functional.
        """
        if channel not in self.data:
            return False
        if max_missing_fraction <= 0.0:
            return bool(self.channel_mask.get(channel, False))
        return self.missing_fraction(channel) <= max_missing_fraction

    def mask_string(self, channels: Sequence[str] = CHANNELS) -> str:
        return "".join("1" if self.channel_mask.get(name, False) else "0" for name in channels)


@dataclass
class WindowSet:
    """Windows of one split, ordered by (subject_id, start_index)."""

    windows: List[Window] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self) -> None:
        self.windows = sorted(self.windows, key=lambda w: w.key)
        keys = [w.key for w in self.windows]
        if len(set(keys)) != len(keys):
            raise BadLength(f"duplicate window keys in {self.split} set")

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=np.int64)

    @property
    def subjects(self) -> List[str]:
        return sorted({w.subject_id for w in self.windows})

    def by_key(self) -> Dict[Tuple[str, int], Window]:
        return {w.key: w for w in self.windows}

    def subset(self, subjects: Iterable[str]) -> "WindowSet":
        wanted = set(subjects)
        return WindowSet([w for w in self.windows if w.subject_id in wanted], split=self.split)


def _fog_fraction(label: np.ndarray, start: int, window_len: int) -> float:
    return float(label[start:start + window_len].mean())


def _make_window(rec: LabeledRecording, start: int, window_len: int, label: int, fraction: float) -> Window:
    data = {name: rec.channels[name][start:start + window_len].copy() for name in rec.channels}
    return Window(
        subject_id=rec.subject_id,
        start_index=start,
        data=data,
        label=label,
        fog_fraction=fraction,
    )


def segment_dhwt(
    rec: LabeledRecording,
    window_len: int = DEFAULT_WINDOW_LEN,
    fog_overlap: float = 0.5,
    nofog_overlap: float = 0.0,
) -> WindowSet:
    """
    Segment a recording with differential hopping.

    Candidate windows start every ``window_len * (1 - fog_overlap)`` samples.
    A candidate whose FOG fraction is a strict majority is kept as FOG.
    A candidate without any FOG sample is kept as no-FOG only if it lies on
    the no-FOG hop grid (``window_len * (1 - nofog_overlap)``). Everything
    else is impure and dropped.

    Raises:
        RecordingTooShort: If the recording is shorter than one window
        BadLength: If the window length or overlaps do not give integral hops
    """
    if window_len < 2 or window_len % 2:
        raise BadLength(f"window length must be even, got {window_len}")
    fog_hop = int(round(window_len * (1.0 - fog_overlap)))
    nofog_hop = int(round(window_len * (1.0 - nofog_overlap)))
    if fog_hop < 1 or nofog_hop < 1 or nofog_hop % fog_hop:
        raise BadLength(f"overlaps {fog_overlap}/{nofog_overlap} give incompatible hops")
    if len(rec) < window_len:
        raise RecordingTooShort(f"{rec.subject_id}: {len(rec)} samples < window length {window_len}")

    windows = []
    for start in range(0, len(rec) - window_len + 1, fog_hop):
        fraction = _fog_fraction(rec.label, start, window_len)
        if fraction > 0.5:
            windows.append(_make_window(rec, start, window_len, 1, fraction))
        elif fraction == 0.0 and start % nofog_hop == 0:
            windows.append(_make_window(rec, start, window_len, 0, fraction))
    return WindowSet(windows, split="train")


def segment_fixed(
    rec: LabeledRecording,
    window_len: int = DEFAULT_WINDOW_LEN,
    labeling: str = "majority",
    split: str = "test",
) -> WindowSet:
    """
    Segment a recording into non-overlapping windows for evaluation.

    Args:
        rec: Labeled recording
        window_len: Window length in samples
        labeling: "majority" labels every window by its majority class;
            "strict" keeps FOG-majority windows as 1 and FOG-free windows
            as 0. Exact ties are dropped in both modes. A majority no-FOG
            window keeps its measured ``fog_fraction`` (below 0.5).
        split: Split tag for the resulting set
    """
    if labeling not in ("strict", "majority"):
        raise BadLength(f"unknown labeling {labeling!r}")
    if len(rec) < window_len:
        raise RecordingTooShort(f"{rec.subject_id}: {len(rec)} samples < window length {window_len}")

    windows = []
    for start in range(0, len(rec) - window_len + 1, window_len):
        fraction = _fog_fraction(rec.label, start, window_len)
        if fraction > 0.5:
            windows.append(_make_window(rec, start, window_len, 1, fraction))
        elif fraction == 0.0 or (labeling == "majority" and fraction < 0.5):
            windows.append(_make_window(rec, start, window_len, 0, fraction))
    return WindowSet(windows, split=split)


def center_window(w: Window) -> Window:
    """
    Subtract each functional channel's mean from its samples.

    Non-functional channels (with missing samples) are left untouched.
    """
    data = {}
    for name, values in w.data.items():
        if w.channel_mask.get(name, False):
            centered = values - values.mean()
            # second pass removes the rounding residue of the first
            data[name] = centered - centered.mean()
        else:
            data[name] = values
    return replace(w, data=data, channel_mask=dict(w.channel_mask))


def center_window_set(ws: WindowSet) -> WindowSet:
    return WindowSet([center_window(w) for w in ws], split=ws.split)


def class_counts(ws: WindowSet) -> Tuple[int, int]:
    """Return (n_fog, n_nofog)."""
    labels = ws.labels
    n_fog = int((labels == 1).sum())
    return n_fog, int(labels.shape[0] - n_fog)


def merge_window_sets(sets: Iterable[WindowSet], split: str) -> WindowSet:
    """Deterministically merge per-recording window sets into one split."""
    windows: List[Window] = []
    for ws in sets:
        windows.extend(ws.windows)
    return WindowSet(windows, split=split)


def session_offsets(recordings: Sequence[LabeledRecording], window_len: int = DEFAULT_WINDOW_LEN) -> List[int]:
    """
    Start offsets that lay the sessions of each subject on one timeline.

    Sessions of a subject follow each other in input order; every offset is
    a multiple of ``window_len`` and consecutive sessions are one empty
    window apart, so window keys stay unique and episodes never span two
    sessions.
    """
    next_start: Dict[str, int] = {}
    offsets = []
    for rec in recordings:
        offset = next_start.get(rec.subject_id, 0)
        offsets.append(offset)
        blocks = -(-len(rec) // window_len)
        next_start[rec.subject_id] = offset + (blocks + 1) * window_len
    return offsets


def shift_windows(ws: WindowSet, offset: int) -> WindowSet:
    if offset == 0:
        return ws
    return WindowSet([replace(w, start_index=w.start_index + offset) for w in ws], split=ws.split)


def segment_recordings(
    recordings: Sequence[LabeledRecording],
    split: str,
    window_len: int = DEFAULT_WINDOW_LEN,
    fog_overlap: float = 0.5,
    nofog_overlap: float = 0.0,
    labeling: str = "majority",
    workers: int = 1,
    offsets: Optional[Sequence[int]] = None,
) -> WindowSet:
    """
    Segment and centre several recordings into one split.

    The train split uses differential hopping; validation and test use
    fixed non-overlapping windows. Recordings shorter than one window are
    skipped with a warning. ``offsets`` shifts the start indices of each
    recording (see ``session_offsets``).
    """
    offsets = list(offsets) if offsets is not None else [0] * len(recordings)

    def run(item: Tuple[LabeledRecording, int]) -> Optional[WindowSet]:
        rec, offset = item
        try:
            if split == "train":
                ws = segment_dhwt(rec, window_len, fog_overlap, nofog_overlap)
            else:
                ws = segment_fixed(rec, window_len, labeling, split=split)
        except RecordingTooShort as e:
            logger.warning("Skipping recording: %s", e)
            return None
        return shift_windows(center_window_set(ws), offset)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, zip(recordings, offsets)))
    merged = merge_window_sets([ws for ws in results if ws is not None], split=split)
    n_fog, n_nofog = class_counts(merged)
    logger.info("%s split: %d windows (%d FOG, %d no-FOG)", split, len(merged), n_fog, n_nofog)
    return merged


@dataclass
class RebalanceReport:
    """Window counts with and without differential hopping."""

    baseline_fog: int
    baseline_nofog: int
    dhwt_fog: int
    dhwt_nofog: int

    @property
    def fog_increase_percent(self) -> Optional[float]:
        if self.baseline_fog == 0:
            return None
        return 100.0 * (self.dhwt_fog - self.baseline_fog) / self.baseline_fog

    def to_dict(self) -> Dict[str, object]:
        return {
            "baseline_fog": self.baseline_fog,
            "baseline_nofog": self.baseline_nofog,
            "dhwt_fog": self.dhwt_fog,
            "dhwt_nofog": self.dhwt_nofog,
            "fog_increase_percent": self.fog_increase_percent,
        }


def dhwt_gain(
    recordings: Sequence[LabeledRecording],
    window_len: int = DEFAULT_WINDOW_LEN,
    fog_overlap: float = 0.5,
) -> RebalanceReport:
    """Compare class counts of 0%-overlap segmentation against differential hopping."""
    base_fog = base_nofog = fog = nofog = 0
    for rec in recordings:
        if len(rec) < window_len:
            continue
        baseline = segment_dhwt(rec, window_len, fog_overlap=0.0, nofog_overlap=0.0)
        hopped = segment_dhwt(rec, window_len, fog_overlap=fog_overlap, nofog_overlap=0.0)
        b_fog, b_nofog = class_counts(baseline)
        h_fog, h_nofog = class_counts(hopped)
        base_fog += b_fog
        base_nofog += b_nofog
        fog += h_fog
        nofog += h_nofog
    return RebalanceReport(base_fog, base_nofog, fog, nofog)
