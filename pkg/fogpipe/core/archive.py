"""
On-disk archives of window sets and GASF tensor sets.

An archive is a directory holding a raw little-endian array file and a
``manifest.csv`` with one row per window (subject_id, start_index, label,
fog_fraction, channel_mask). Rows and array records share the same order,
which is the (subject_id, start_index) order of the set.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from fogpipe.core.errors import ContainerError, MissingWindowKey
from fogpipe.core.gaf import GafTensorSet
from fogpipe.core.ingest import CHANNELS
from fogpipe.core.windowing import Window, WindowSet

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
WINDOWS_FILE = "windows.bin"
GAF_FILE = "gaf.bin"
MANIFEST_COLUMNS = ["subject_id", "start_index", "label", "fog_fraction", "channel_mask"]


def _write_manifest(directory: Path, rows: List[Tuple[str, int, int, float, str]]) -> None:
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    frame.to_csv(directory / MANIFEST, index=False, lineterminator="\n")


def read_manifest(directory: Union[str, Path]) -> pd.DataFrame:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ContainerError(f"no manifest in {directory}")
    return pd.read_csv(
        path,
        dtype={"subject_id": str, "channel_mask": str, "start_index": np.int64, "label": np.int64},
        float_precision="round_trip",
        keep_default_na=False,
    )


def _masks(frame: pd.DataFrame) -> Dict[str, np.ndarray]:
    bits = frame["channel_mask"].tolist()
    return {name: np.array([b[i] == "1" for b in bits], dtype=bool) for i, name in enumerate(CHANNELS)}


def _record_shape(path: Path, n: int, itemsize: int, dims: int) -> int:
    """Side length of the per-record array, recovered from the file size."""
    size = path.stat().st_size
    if n == 0:
        return 0
    per_channel = size / (n * len(CHANNELS) * itemsize)
    side = round(per_channel ** (1.0 / dims))
    if side ** dims * n * len(CHANNELS) * itemsize != size:
        raise ContainerError(f"{path.name} size {size} does not fit {n} records")
    return side


def save_window_archive(ws: WindowSet, directory: Union[str, Path]) -> Path:
    """Write ``windows.bin`` (N x 3 x W float64, NaN = missing) and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(ws):
        array = np.stack([np.stack([w.data[name] for name in CHANNELS]) for w in ws.windows])
    else:
        array = np.zeros((0, len(CHANNELS), 0))
    (directory / WINDOWS_FILE).write_bytes(np.ascontiguousarray(array, dtype="<f8").tobytes())
    _write_manifest(
        directory,
        [(w.subject_id, w.start_index, w.label, w.fog_fraction, w.mask_string(CHANNELS)) for w in ws.windows],
    )
    logger.info("Wrote %d %s windows to %s", len(ws), ws.split, directory)
    return directory


def load_window_archive(directory: Union[str, Path], split: Optional[str] = None) -> WindowSet:
    directory = Path(directory)
    frame = read_manifest(directory)
    path = directory / WINDOWS_FILE
    n = len(frame)
    length = _record_shape(path, n, 8, 1)
    array = np.fromfile(path, dtype="<f8").reshape(n, len(CHANNELS), length)
    masks = _masks(frame)
    windows = []
    for i, row in enumerate(frame.itertuples(index=False)):
        windows.append(
            Window(
                subject_id=row.subject_id,
                start_index=int(row.start_index),
                data={name: array[i, c].astype(np.float64) for c, name in enumerate(CHANNELS)},
                label=int(row.label),
                fog_fraction=float(row.fog_fraction),
                channel_mask={name: bool(masks[name][i]) for name in CHANNELS},
            )
        )
    return WindowSet(windows, split=split or directory.name)


def save_gaf_archive(gs: GafTensorSet, directory: Union[str, Path]) -> Path:
    """Write ``gaf.bin`` (N x 3 x H x W float32) and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(gs)
    size = gs.image_size if n else 0
    array = np.zeros((n, len(CHANNELS), size, size), dtype="<f4")
    masks = {}
    for c, name in enumerate(CHANNELS):
        if name in gs.planes:
            array[:, c] = gs.planes[name]
        masks[name] = gs.masks.get(name, np.zeros(n, dtype=bool))
    (directory / GAF_FILE).write_bytes(array.tobytes())
    rows = []
    for i, (subject, start) in enumerate(gs.keys):
        bits = "".join("1" if masks[name][i] else "0" for name in CHANNELS)
        rows.append((subject, start, int(gs.labels[i]), float(gs.fog_fractions[i]), bits))
    _write_manifest(directory, rows)
    return directory


def load_gaf_archive(directory: Union[str, Path], split: Optional[str] = None) -> GafTensorSet:
    directory = Path(directory)
    frame = read_manifest(directory)
    path = directory / GAF_FILE
    n = len(frame)
    side = _record_shape(path, n, 4, 2)
    array = np.fromfile(path, dtype="<f4").reshape(n, len(CHANNELS), side, side)
    return GafTensorSet(
        keys=list(zip(frame["subject_id"].tolist(), frame["start_index"].astype(int).tolist())),
        labels=frame["label"].to_numpy(dtype=np.int64),
        fog_fractions=frame["fog_fraction"].to_numpy(dtype=np.float64),
        planes={name: np.ascontiguousarray(array[:, c]).astype(np.float32) for c, name in enumerate(CHANNELS)},
        masks=_masks(frame),
        split=split or directory.name,
        channels=CHANNELS,
    )


def find_window(ws: WindowSet, key: Tuple[str, int]) -> Window:
    """
    Look up a window by (subject_id, start_index).

    Raises:
        MissingWindowKey: If no window has that key
    """
    try:
        return ws.by_key()[key]
    except KeyError:
        raise MissingWindowKey(f"no window {key[0]}@{key[1]} in the {ws.split} archive") from None
