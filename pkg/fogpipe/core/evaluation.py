"""
Evaluation module for fogpipe.

Window-level and episode-level detection metrics, ranking of
single-channel models by test F1, and inference that falls back to the
next best channel when the preferred one is not functional.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fogpipe.core.errors import (
    AllChannelsFailed,
    BadConfig,
    DataError,
    GridMismatch,
    LengthMismatch,
    MissingColumn,
    MissingF1,
    UnsortedInput,
)
from fogpipe.core.gaf import window_tensor
from fogpipe.core.model import TrainedModel, load_model
from fogpipe.core.windowing import Window

logger = logging.getLogger(__name__)

# tie-break order when two channels score the same test F1
TIE_ORDER: Tuple[str, ...] = ("AccV", "AccAP", "AccML")
METRICS: Tuple[str, ...] = ("accuracy", "precision", "sensitivity", "specificity", "f1", "fpr")
RANKING_COLUMNS: Tuple[str, ...] = ("rank", "channel", "model_path", "test_f1")

GridPoint = Tuple[str, int, int]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass
class EvalReport:
    """
    Detection metrics. ``None`` marks a ratio whose denominator is zero.
    """

    counts: ConfusionCounts
    accuracy: Optional[float]
    precision: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    fpr: Optional[float]
    level: str = "window"

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, level: str = "window") -> "EvalReport":
        tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
        return cls(
            counts=counts,
            accuracy=_ratio(tp + tn, counts.total),
            precision=_ratio(tp, tp + fp),
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
            f1=_ratio(2 * tp, 2 * tp + fp + fn),
            fpr=_ratio(fp, fp + tn),
            level=level,
        )

    def to_dict(self) -> Dict[str, object]:
        data: Dict[str, object] = {"level": self.level}
        data.update({"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn})
        data.update({name: getattr(self, name) for name in METRICS})
        return data

    def to_text(self) -> str:
        lines = [f"{self.level} level ({self.counts.total} counted)"]
        lines.append(f"  TP {self.counts.tp}  FP {self.counts.fp}  FN {self.counts.fn}  TN {self.counts.tn}")
        for name in METRICS:
            value = getattr(self, name)
            lines.append(f"  {name:<12} {'undefined' if value is None else f'{value:.4f}'}")
        return "\n".join(lines)


def window_metrics(preds: Sequence[int], labels: Sequence[int], level: str = "window") -> EvalReport:
    """
    Confusion counts and metrics of binary predictions.

    Raises:
        LengthMismatch: If the sequences differ in length or are empty
    """
    p = np.asarray(preds, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != y.shape or p.size == 0:
        raise LengthMismatch(f"{p.size} predictions for {y.size} labels")
    counts = ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
    )
    return EvalReport.from_counts(counts, level)


@dataclass(frozen=True)
class Episode:
    """A maximal run of FOG windows; bounds are inclusive grid positions."""

    subject_id: str
    start_index: int
    end_index: int

    def positions(self) -> range:
        return range(self.start_index, self.end_index + 1)


def window_grid(keys: Sequence[Tuple[str, int]], flags: Sequence[int], window_len: int) -> List[GridPoint]:
    """Turn window keys into (subject, grid position, flag) triples."""
    return [(subject, start // window_len, int(flag)) for (subject, start), flag in zip(keys, flags)]


def merge_episodes(window_stream: Iterable[GridPoint]) -> List[Episode]:
    """
    Merge consecutive flagged windows of one subject into episodes.

    Raises:
        UnsortedInput: If the stream is not strictly increasing by (subject, position)
    """
    episodes: List[Episode] = []
    previous: Optional[Tuple[str, int]] = None
    run_start: Optional[int] = None
    run_end = 0
    run_subject = ""
    for subject, position, flag in window_stream:
        if previous is not None and (subject, position) <= previous:
            raise UnsortedInput(f"window {(subject, position)} follows {previous}")
        previous = (subject, position)
        extends = run_start is not None and subject == run_subject and position == run_end + 1
        if flag and extends:
            run_end = position
            continue
        if run_start is not None:
            episodes.append(Episode(run_subject, run_start, run_end))
            run_start = None
        if flag:
            run_subject, run_start, run_end = subject, position, position
    if run_start is not None:
        episodes.append(Episode(run_subject, run_start, run_end))
    return episodes


def explode_episodes(episodes: Sequence[Episode], grid: Sequence[Tuple[str, int]]) -> List[int]:
    """Flags on a grid: 1 at every position covered by an episode."""
    covered = {(e.subject_id, pos) for e in episodes for pos in e.positions()}
    return [int(point in covered) for point in grid]


def episode_metrics(
    pred_eps: Sequence[Episode],
    true_eps: Sequence[Episode],
    pred_windows: Sequence[GridPoint],
    true_windows: Sequence[GridPoint],
) -> EvalReport:
    """
    Episode-level detection metrics.

    A true episode is a TP if some predicted episode shares a grid position
    with it, otherwise an FN. A predicted episode overlapping no true
    episode is an FP. Grid windows outside every episode count as TN.

    Raises:
        GridMismatch: If the two window streams are not on the same grid
    """
    grid = [(s, pos) for s, pos, _ in true_windows]
    if grid != [(s, pos) for s, pos, _ in pred_windows]:
        raise GridMismatch("predicted and true windows lie on different grids")

    pred_cover = {(e.subject_id, pos) for e in pred_eps for pos in e.positions()}
    true_cover = {(e.subject_id, pos) for e in true_eps for pos in e.positions()}
    tp = sum(1 for e in true_eps if any((e.subject_id, pos) in pred_cover for pos in e.positions()))
    fp = sum(1 for e in pred_eps if not any((e.subject_id, pos) in true_cover for pos in e.positions()))
    tn = sum(1 for point in grid if point not in pred_cover and point not in true_cover)
    return EvalReport.from_counts(ConfusionCounts(tp=tp, fp=fp, fn=len(true_eps) - tp, tn=tn), level="episode")


def evaluate_predictions(
    keys: Sequence[Tuple[str, int]],
    preds: Sequence[int],
    labels: Sequence[int],
    window_len: int,
) -> Tuple[EvalReport, EvalReport, List[Episode]]:
    """Window and episode reports for one test set; also returns the predicted episodes."""
    window_report = window_metrics(preds, labels)
    pred_stream = window_grid(keys, preds, window_len)
    true_stream = window_grid(keys, labels, window_len)
    pred_eps = merge_episodes(pred_stream)
    episode_report = episode_metrics(pred_eps, merge_episodes(true_stream), pred_stream, true_stream)
    return window_report, episode_report, pred_eps


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """
    Mean of several reports; counts are summed.

    Each metric is averaged over the reports where it is defined and stays
    undefined only if it is undefined everywhere.
    """
    if not reports:
        raise LengthMismatch("no reports to average")
    counts = ConfusionCounts()
    for report in reports:
        counts = counts + report.counts
    means: Dict[str, Optional[float]] = {}
    for name in METRICS:
        defined = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        means[name] = float(np.mean(defined)) if defined else None
    return EvalReport(counts=counts, level=reports[0].level, **means)


def reports_to_csv(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """One CSV row per (name, report); undefined metrics are empty cells."""
    frame = pd.DataFrame([{"name": name, **report.to_dict()} for name, report in rows])
    return frame.to_csv(index=False, lineterminator="\n")


def episodes_to_csv(episodes: Sequence[Episode]) -> str:
    frame = pd.DataFrame(
        [(e.subject_id, e.start_index, e.end_index) for e in episodes],
        columns=["subject", "start", "end"],
    )
    return frame.to_csv(index=False, lineterminator="\n")


@dataclass
class RankEntry:
    channel: str
    model: Union[TrainedModel, str, Path, None]
    test_f1: float

    @property
    def model_path(self) -> str:
        return "" if isinstance(self.model, TrainedModel) or self.model is None else str(self.model)


@dataclass
class ChannelRanking:
    """Single-channel models in descending order of test F1."""

    entries: List[RankEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def channels(self) -> List[str]:
        return [e.channel for e in self.entries]

    def to_csv(self) -> str:
        frame = pd.DataFrame(
            [(i + 1, e.channel, e.model_path, e.test_f1) for i, e in enumerate(self.entries)],
            columns=list(RANKING_COLUMNS),
        )
        return frame.to_csv(index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, text: str, base_dir: Union[str, Path, None] = None) -> "ChannelRanking":
        """
        Read a ranking file; relative model paths are resolved against ``base_dir``.

        Raises:
            MissingColumn: If a ranking column is absent
            DataError: If the file is not a readable ranking table
        """
        try:
            frame = pd.read_csv(io.StringIO(text), dtype={"channel": str, "model_path": str})
        except (ValueError, pd.errors.ParserError) as e:
            raise DataError(f"malformed ranking file: {e}") from e
        absent = [name for name in RANKING_COLUMNS if name not in frame.columns]
        if absent:
            raise MissingColumn(f"ranking file lacks column(s): {', '.join(absent)}")
        entries = []
        try:
            for row in frame.sort_values("rank").itertuples(index=False):
                path = Path(row.model_path)
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                entries.append(RankEntry(row.channel, path, float(row.test_f1)))
        except (TypeError, ValueError) as e:
            raise DataError(f"malformed ranking row: {e}") from e
        return cls(entries)


def _tie_position(channel: str) -> int:
    return TIE_ORDER.index(channel) if channel in TIE_ORDER else len(TIE_ORDER)


def rank_channels(
    models: Sequence[TrainedModel],
    model_paths: Optional[Sequence[Union[str, Path]]] = None,
) -> ChannelRanking:
    """
    Rank single-channel models by descending test F1.

    Args:
        models: Trained single-channel models with ``test_f1`` set
        model_paths: Optional weight file of each model, recorded in the ranking

    Raises:
        MissingF1: If a model has no test F1
        BadConfig: If a model uses more than one channel
    """
    entries = []
    for index, model in enumerate(models):
        if len(model.channels) != 1:
            raise BadConfig(f"ranking needs single-channel models, got {list(model.channels)}")
        if model.test_f1 is None:
            raise MissingF1(f"model for {model.channels[0]} has no test F1")
        reference = model_paths[index] if model_paths is not None else model
        entries.append(RankEntry(model.channels[0], reference, float(model.test_f1)))
    entries.sort(key=lambda e: (-e.test_f1, _tie_position(e.channel)))
    return ChannelRanking(entries)


def fill_missing(values: np.ndarray) -> np.ndarray:
    """Linearly interpolate missing samples; edges take the nearest value."""
    return pd.Series(values).interpolate(limit_direction="both").to_numpy(dtype=np.float64)


def infer_with_fallback(
    ranking: ChannelRanking,
    w: Window,
    max_missing_fraction: float = 0.0,
    loader: Callable[[Union[str, Path]], TrainedModel] = load_model,
) -> Tuple[int, str]:
    """
    Predict a window with the best-ranked functional channel.

    Channels are tried in ranking order; the first one that is functional in
    the window is used, and only its model is loaded. With a positive
    ``max_missing_fraction`` a channel with few missing samples still counts
    as functional and its gaps are interpolated.

    Returns:
        (predicted class, channel used)

    Raises:
        AllChannelsFailed: If no ranked channel is functional
    """
    for entry in ranking:
        if not w.is_functional(entry.channel, max_missing_fraction):
            logger.info("Channel %s not functional in window %s, falling back", entry.channel, w.key)
            continue
        if not isinstance(entry.model, TrainedModel):
            entry.model = loader(entry.model)
        model = entry.model
        window = w
        if not w.channel_mask.get(entry.channel, False):
            data = dict(w.data)
            data[entry.channel] = fill_missing(w.data[entry.channel])
            window = Window(w.subject_id, w.start_index, data, w.label, w.fog_fraction)
        tensor = window_tensor(window, entry.channel, model.config.image_size, model.config.angle_source)
        prediction = int(model.predict_tensors([tensor])[0])
        return prediction, entry.channel
    raise AllChannelsFailed(f"no functional channel among {ranking.channels} in window {w.key}")
