"""
Gramian angular summation field encoding for fogpipe.

A window channel is reduced by piecewise aggregate approximation, rescaled
to [-1, 1], mapped to polar angles and turned into the matrix
cos(theta_i + theta_j). The module also exports images as PNG and builds
the per-channel image tensors the network consumes.
"""

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from fogpipe.core.errors import BadLength, OutOfRange, ShapeMismatch
from fogpipe.core.ingest import CHANNELS
from fogpipe.core.windowing import Window, WindowSet

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 64
ANGLE_SOURCES = ("bipolar", "unipolar")
_CLAMP_TOLERANCE = 1e-9


@dataclass
class PolarEncoding:
    """Angles and radii of a rescaled series."""

    theta: np.ndarray
    radius: np.ndarray
    values: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.theta.shape[0])


@dataclass
class GafImage:
    """One channel's GASF matrix for one window."""

    matrix: np.ndarray
    channel_name: str = ""
    window_key: Tuple[str, int] = ("", 0)

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])


def paa_reduce(series: Sequence[float], target: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """
    Piecewise aggregate approximation by block means.

    Raises:
        BadLength: If the series length is not a positive multiple of ``target``
    """
    values = np.asarray(series, dtype=np.float64)
    if target < 1 or values.ndim != 1 or values.shape[0] == 0 or values.shape[0] % target:
        raise BadLength(f"series of length {values.shape[0]} cannot be reduced to {target} points")
    return values.reshape(target, -1).mean(axis=1)


def rescale_bipolar(series: Sequence[float]) -> np.ndarray:
    """
    Min-max rescale to [-1, 1]; a constant series maps to all zeros.

    Raises:
        BadLength: For an empty series
    """
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise BadLength("cannot rescale an empty series")
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    unit = (values - low) / (high - low)
    return 2.0 * unit - 1.0


def rescale_unit(series: Sequence[float]) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant series maps to all zeros."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise BadLength("cannot rescale an empty series")
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def polar_encode(x_bipolar: Sequence[float]) -> PolarEncoding:
    """
    Map rescaled values to angles ``arccos(x)`` and radii ``(i + 1) / N``.

    Values within 1e-9 outside [-1, 1] are clamped.

    Raises:
        OutOfRange: If any value lies further outside [-1, 1]
    """
    values = np.asarray(x_bipolar, dtype=np.float64)
    if values.size and np.abs(values).max() > 1.0 + _CLAMP_TOLERANCE:
        raise OutOfRange(f"values must lie in [-1, 1], max |x| = {np.abs(values).max()}")
    values = np.clip(values, -1.0, 1.0)
    n = values.shape[0]
    return PolarEncoding(
        theta=np.arccos(values),
        radius=np.arange(1, n + 1, dtype=np.float64) / n,
        values=values,
    )


def gasf(p: PolarEncoding, channel_name: str = "", window_key: Tuple[str, int] = ("", 0)) -> GafImage:
    """Gramian angular summation field ``cos(theta_i + theta_j)``."""
    if p.values is not None:
        # cos(a + b) = cos a cos b - sin a sin b, exact in the rescaled values
        x = p.values
        s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
        matrix = np.outer(x, x) - np.outer(s, s)
    else:
        matrix = np.cos(p.theta[:, None] + p.theta[None, :])
    matrix = np.clip(matrix, -1.0, 1.0)
    return GafImage(matrix=matrix, channel_name=channel_name, window_key=window_key)


def series_to_gaf(
    series: Sequence[float],
    image_size: int = DEFAULT_IMAGE_SIZE,
    angle_source: str = "bipolar",
    channel_name: str = "",
    window_key: Tuple[str, int] = ("", 0),
) -> GafImage:
    """
    Full encoding of one channel: reduce, rescale, polar map, GASF.

    ``angle_source="unipolar"`` takes the angles from the [0, 1] rescaled
    values instead of the [-1, 1] ones, which confines them to [0, pi/2].
    A constant series carries no angular information and yields a zero
    plane, the same encoding a non-functional channel gets.
    """
    if angle_source not in ANGLE_SOURCES:
        raise BadLength(f"unknown angle source {angle_source!r}")
    reduced = paa_reduce(series, image_size)
    if reduced.max() == reduced.min():
        return GafImage(np.zeros((image_size, image_size)), channel_name=channel_name, window_key=window_key)
    scaled = rescale_bipolar(reduced) if angle_source == "bipolar" else rescale_unit(reduced)
    return gasf(polar_encode(scaled), channel_name=channel_name, window_key=window_key)


def to_input_tensor(img: GafImage) -> np.ndarray:
    """Replicate the GASF plane into an (H, W, 3) tensor."""
    return np.repeat(img.matrix[:, :, None], 3, axis=2)


def _to_pixels(matrix: np.ndarray) -> np.ndarray:
    scaled = (np.clip(matrix, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def _png_bytes(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def export_png(img: GafImage) -> bytes:
    """Encode an image as 8-bit grayscale PNG, pixel = round((v + 1) / 2 * 255)."""
    return _png_bytes(_to_pixels(img.matrix))


def export_difference_png(a: GafImage, b: GafImage) -> bytes:
    """Encode |a - b| as 8-bit grayscale PNG, pixel = round(|a - b| / 2 * 255)."""
    if a.matrix.shape != b.matrix.shape:
        raise ShapeMismatch(f"image shapes differ: {a.matrix.shape} vs {b.matrix.shape}")
    diff = np.abs(a.matrix - b.matrix) / 2.0 * 255.0
    return _png_bytes(np.floor(np.clip(diff, 0.0, 255.0) + 0.5).astype(np.uint8))


def gaf_difference(a: GafImage, b: GafImage, top_k: int = 15) -> List[Tuple[int, int, float]]:
    """
    The ``top_k`` cells with the largest absolute difference.

    Ties are broken by (i, j) in lexicographic order.

    Raises:
        ShapeMismatch: If the matrices differ in shape
    """
    if a.matrix.shape != b.matrix.shape:
        raise ShapeMismatch(f"image shapes differ: {a.matrix.shape} vs {b.matrix.shape}")
    diff = np.abs(a.matrix - b.matrix).ravel()
    # stable sort on the negated values keeps row-major order among equal cells
    order = np.argsort(-diff, kind="stable")[:top_k]
    width = a.matrix.shape[1]
    return [(int(k // width), int(k % width), float(diff[k])) for k in order]


@dataclass
class GafTensorSet:
    """GASF planes of a window set, one array per channel."""

    keys: List[Tuple[str, int]]
    labels: np.ndarray
    fog_fractions: np.ndarray
    planes: Dict[str, np.ndarray]
    masks: Dict[str, np.ndarray]
    split: str = "train"
    channels: Tuple[str, ...] = field(default=CHANNELS)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def image_size(self) -> int:
        return int(next(iter(self.planes.values())).shape[1])

    def tensors(self, channel: str, index: Optional[np.ndarray] = None) -> np.ndarray:
        """(N, H, W, 3) replicated input tensors for one channel."""
        plane = self.planes[channel] if index is None else self.planes[channel][index]
        return np.repeat(plane[..., None], 3, axis=-1)

    def functional(self, channels: Sequence[str]) -> np.ndarray:
        """Boolean index of samples whose listed channels are all functional."""
        keep = np.ones(len(self.keys), dtype=bool)
        for name in channels:
            keep &= self.masks[name]
        return keep

    def select(self, index: np.ndarray) -> "GafTensorSet":
        positions = np.flatnonzero(index) if index.dtype == bool else np.asarray(index)
        return GafTensorSet(
            keys=[self.keys[i] for i in positions],
            labels=self.labels[positions],
            fog_fractions=self.fog_fractions[positions],
            planes={name: plane[positions] for name, plane in self.planes.items()},
            masks={name: mask[positions] for name, mask in self.masks.items()},
            split=self.split,
            channels=self.channels,
        )

    def subjects(self) -> List[str]:
        return sorted({subject for subject, _ in self.keys})

    def subset_subjects(self, subjects: Sequence[str]) -> "GafTensorSet":
        wanted = set(subjects)
        return self.select(np.array([subject in wanted for subject, _ in self.keys], dtype=bool))


def window_planes(
    w: Window,
    image_size: int = DEFAULT_IMAGE_SIZE,
    angle_source: str = "bipolar",
    channels: Sequence[str] = CHANNELS,
) -> Dict[str, np.ndarray]:
    """GASF plane per channel; non-functional channels yield a zero plane."""
    planes = {}
    for name in channels:
        if w.channel_mask.get(name, False):
            planes[name] = series_to_gaf(w.data[name], image_size, angle_source, name, w.key).matrix
        else:
            planes[name] = np.zeros((image_size, image_size), dtype=np.float64)
    return planes


def window_tensor(
    w: Window,
    channel: str,
    image_size: int = DEFAULT_IMAGE_SIZE,
    angle_source: str = "bipolar",
) -> np.ndarray:
    """(1, H, W, 3) input tensor of one channel of one window."""
    img = series_to_gaf(w.data[channel], image_size, angle_source, channel, w.key)
    return to_input_tensor(img)[None].astype(np.float32)


def transform_window_set(
    ws: WindowSet,
    image_size: int = DEFAULT_IMAGE_SIZE,
    angle_source: str = "bipolar",
    channels: Sequence[str] = CHANNELS,
    workers: int = 1,
) -> GafTensorSet:
    """Encode every window of a set; planes are stored as float32."""
    n = len(ws)
    planes = {name: np.zeros((n, image_size, image_size), dtype=np.float32) for name in channels}
    masks = {name: np.zeros(n, dtype=bool) for name in channels}

    def run(w: Window) -> Dict[str, np.ndarray]:
        return window_planes(w, image_size, angle_source, channels)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for i, (w, result) in enumerate(zip(ws.windows, pool.map(run, ws.windows))):
            for name in channels:
                planes[name][i] = result[name]
                masks[name][i] = bool(w.channel_mask.get(name, False))

    logger.info("Encoded %d %s windows as %dx%d GASF images", n, ws.split, image_size, image_size)
    return GafTensorSet(
        keys=[w.key for w in ws.windows],
        labels=ws.labels,
        fog_fractions=np.array([w.fog_fraction for w in ws.windows], dtype=np.float64),
        planes=planes,
        masks=masks,
        split=ws.split,
        channels=tuple(channels),
    )
