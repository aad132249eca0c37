"""
Unit tests for metrics, episodes, channel ranking and fallback inference.
"""

import io

import numpy as np
import pandas as pd
import pytest

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
from fogpipe.core.evaluation import (
    ChannelRanking,
    ConfusionCounts,
    Episode,
    average_reports,
    episode_metrics,
    episodes_to_csv,
    evaluate_predictions,
    explode_episodes,
    fill_missing,
    infer_with_fallback,
    merge_episodes,
    rank_channels,
    reports_to_csv,
    window_grid,
    window_metrics,
)
from fogpipe.core.gaf import window_tensor
from fogpipe.core.model import ModelConfig, TrainedModel, build_graph
from fogpipe.core.windowing import Window


def stub_model(channel, test_f1=None):
    cfg = ModelConfig(channels=(channel,), image_size=8, seed=1)
    model = TrainedModel(config=cfg, network=build_graph(cfg))
    model.test_f1 = test_f1
    return model


def grid_stream(flags, subject="s"):
    return [(subject, position, flag) for position, flag in enumerate(flags)]


def brute_force_episodes(stream):
    episodes = []
    for subject in sorted({s for s, _, _ in stream}):
        flagged = sorted(p for s, p, f in stream if s == subject and f)
        start = None
        for k, position in enumerate(flagged):
            if start is None:
                start = position
            if k + 1 == len(flagged) or flagged[k + 1] != position + 1:
                episodes.append(Episode(subject, start, position))
                start = None
    return episodes


class TestWindowMetrics:
    """Test cases for window-level metrics."""

    def test_hand_computed(self):
        """Test tp=9, fp=1, fn=1, tn=9."""
        preds = [1] * 9 + [1] + [0] + [0] * 9
        labels = [1] * 9 + [0] + [1] + [0] * 9
        report = window_metrics(preds, labels)

        assert report.counts == ConfusionCounts(tp=9, fp=1, fn=1, tn=9)
        for name in ("accuracy", "precision", "sensitivity", "specificity", "f1"):
            assert getattr(report, name) == pytest.approx(0.9)
        assert report.fpr == pytest.approx(0.1)

    def test_all_negative(self):
        """Test that metrics without positives are undefined, not zero."""
        report = window_metrics([0, 0, 0], [0, 0, 0])

        assert report.precision is None
        assert report.sensitivity is None
        assert report.f1 is None
        assert report.accuracy == 1.0 and report.specificity == 1.0 and report.fpr == 0.0
        assert "undefined" in report.to_text()

    def test_length_mismatch(self):
        """Test that unequal or empty inputs are rejected."""
        with pytest.raises(LengthMismatch):
            window_metrics([0, 1], [0])
        with pytest.raises(LengthMismatch):
            window_metrics([], [])

    def test_average_reports(self):
        """Test that averaging skips undefined values and sums counts."""
        a = window_metrics([0, 0], [0, 0])
        b = window_metrics([1, 0], [1, 1])
        mean = average_reports([a, b])

        assert mean.counts == a.counts + b.counts
        assert mean.precision == 1.0
        assert mean.accuracy == pytest.approx(0.75)

    def test_reports_csv(self):
        """Test that undefined metrics are written as empty cells."""
        text = reports_to_csv([("AccV", window_metrics([0, 0], [0, 0]))])
        frame = pd.read_csv(io.StringIO(text))

        assert frame.loc[0, "name"] == "AccV"
        assert np.isnan(frame.loc[0, "precision"])
        assert frame.loc[0, "tn"] == 2


class TestEpisodes:
    """Test cases for merging windows into episodes."""

    def test_merge_example(self):
        """Test the runs of 0,1,1,0,1."""
        episodes = merge_episodes(grid_stream([0, 1, 1, 0, 1]))
        assert [(e.start_index, e.end_index) for e in episodes] == [(1, 2), (4, 4)]

    def test_gap_in_grid_splits(self):
        """Test that a missing grid position ends an episode."""
        stream = [("s", 0, 1), ("s", 1, 1), ("s", 3, 1)]
        assert [(e.start_index, e.end_index) for e in merge_episodes(stream)] == [(0, 1), (3, 3)]

    def test_subject_change_splits(self):
        """Test that episodes never span two subjects."""
        stream = [("a", 0, 1), ("a", 1, 1), ("b", 2, 1)]
        assert merge_episodes(stream) == [Episode("a", 0, 1), Episode("b", 2, 2)]

    def test_matches_brute_force(self):
        """Test random streams against a per-subject scan."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            stream = []
            for subject in ("a", "b", "c")[: int(rng.integers(1, 4))]:
                positions = np.flatnonzero(rng.random(int(rng.integers(0, 30))) < 0.8)
                stream += [(subject, int(p), int(rng.random() < 0.4)) for p in positions]
            assert merge_episodes(stream) == brute_force_episodes(stream)

    def test_explode_round_trip(self):
        """Test that exploding merged episodes reproduces the flags."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            flags = (rng.random(40) < 0.5).astype(int).tolist()
            stream = grid_stream(flags)
            grid = [(s, p) for s, p, _ in stream]
            assert explode_episodes(merge_episodes(stream), grid) == flags

    def test_unsorted(self):
        """Test that duplicate or decreasing positions are rejected."""
        with pytest.raises(UnsortedInput):
            merge_episodes([("s", 1, 0), ("s", 1, 1)])
        with pytest.raises(UnsortedInput):
            merge_episodes([("b", 0, 1), ("a", 5, 1)])

    def test_episode_metrics_example(self):
        """Test overlap matching on a hand-worked grid."""
        true_stream = grid_stream([0, 1, 1, 0, 0, 0, 1, 1, 0, 0])
        pred_stream = grid_stream([0, 1, 0, 0, 0, 0, 0, 0, 1, 1])
        report = episode_metrics(merge_episodes(pred_stream), merge_episodes(true_stream), pred_stream, true_stream)

        assert report.counts == ConfusionCounts(tp=1, fp=1, fn=1, tn=4)
        assert report.level == "episode"

    def test_episode_metrics_matches_oracle(self):
        """Test random grids against a direct overlap count."""
        rng = np.random.default_rng(2)
        for _ in range(200):
            truth = (rng.random(30) < 0.3).astype(int)
            pred = (rng.random(30) < 0.3).astype(int)
            true_eps = merge_episodes(grid_stream(truth))
            pred_eps = merge_episodes(grid_stream(pred))
            report = episode_metrics(pred_eps, true_eps, grid_stream(pred), grid_stream(truth))

            tp = sum(any(pred[p] for p in e.positions()) for e in true_eps)
            fp = sum(not any(truth[p] for p in e.positions()) for e in pred_eps)
            tn = int(((truth == 0) & (pred == 0)).sum())
            assert report.counts == ConfusionCounts(tp=tp, fp=fp, fn=len(true_eps) - tp, tn=tn)

    def test_grid_mismatch(self):
        """Test that streams on different grids are rejected."""
        with pytest.raises(GridMismatch):
            episode_metrics([], [], grid_stream([0, 0]), grid_stream([0, 0, 0]))

    def test_evaluate_predictions(self):
        """Test window keys mapped onto the grid."""
        keys = [("s", 0), ("s", 256), ("s", 512), ("t", 0)]
        window_report, episode_report, episodes = evaluate_predictions(keys, [1, 1, 0, 1], [1, 0, 0, 1], 256)

        assert window_grid(keys, [1, 1, 0, 1], 256)[1] == ("s", 1, 1)
        assert window_report.counts == ConfusionCounts(tp=2, fp=1, fn=0, tn=1)
        assert episodes == [Episode("s", 0, 1), Episode("t", 0, 0)]
        assert episode_report.counts.tp == 2
        assert episodes_to_csv(episodes).splitlines() == ["subject,start,end", "s,0,1", "t,0,0"]


class TestRanking:
    """Test cases for ranking single-channel models."""

    def test_order_by_f1(self):
        """Test descending test F1."""
        models = [stub_model("AccAP", 0.830), stub_model("AccV", 0.963), stub_model("AccML", 0.930)]
        ranking = rank_channels(models)
        assert ranking.channels == ["AccV", "AccML", "AccAP"]

    def test_ties(self):
        """Test that equal scores fall back to the fixed channel order."""
        models = [stub_model(name, 0.9) for name in ("AccML", "AccAP", "AccV")]
        assert rank_channels(models).channels == ["AccV", "AccAP", "AccML"]

    def test_missing_f1(self):
        """Test that an unscored model cannot be ranked."""
        with pytest.raises(MissingF1):
            rank_channels([stub_model("AccV", 0.9), stub_model("AccML")])

    def test_multi_channel(self):
        """Test that multichannel models are rejected."""
        cfg = ModelConfig(channels=("AccV", "AccML"), image_size=8)
        model = TrainedModel(config=cfg, network=build_graph(cfg), metadata={"test_f1": 0.5})
        with pytest.raises(BadConfig):
            rank_channels([model])

    def test_csv_round_trip(self, temp_dir):
        """Test that relative model paths are resolved on reading."""
        models = [stub_model("AccV", 0.963), stub_model("AccML", 0.930)]
        ranking = rank_channels(models, ["models/AccV.fogw", "models/AccML.fogw"])
        again = ChannelRanking.from_csv(ranking.to_csv(), temp_dir)

        assert ranking.to_csv().splitlines()[0] == "rank,channel,model_path,test_f1"
        assert again.channels == ["AccV", "AccML"]
        assert [e.model for e in again] == [temp_dir / "models/AccV.fogw", temp_dir / "models/AccML.fogw"]
        assert [e.test_f1 for e in again] == pytest.approx([0.963, 0.930])

    def test_csv_missing_column(self):
        """Test that a ranking file without a rank column is a data error."""
        with pytest.raises(MissingColumn) as info:
            ChannelRanking.from_csv("channel,model_path,test_f1\nAccV,m.fogw,0.9\n")
        assert info.value.exit_code == 2

    @pytest.mark.parametrize(
        "text",
        ["", "rank,channel,model_path,test_f1\n1,AccV,m.fogw,high\n", 'rank,channel\n1,"AccV\n'],
    )
    def test_csv_malformed(self, text):
        """Test that unreadable ranking files are data errors."""
        with pytest.raises(DataError):
            ChannelRanking.from_csv(text)


class TestFallbackInference:
    """Test cases for inference with channel fallback."""

    def setup_method(self):
        """Build a ranking backed by a recording loader."""
        self.loaded = []
        self.models = {name: stub_model(name) for name in ("AccV", "AccML", "AccAP")}
        scores = {"AccV": 0.963, "AccML": 0.930, "AccAP": 0.830}
        for name, model in self.models.items():
            model.test_f1 = scores[name]
        self.ranking = rank_channels(list(self.models.values()), [f"{n}.fogw" for n in self.models])

    def loader(self, path):
        self.loaded.append(str(path))
        return self.models[str(path).split(".")[0]]

    def window(self, nan_channels=(), nan_count=64):
        rng = np.random.default_rng(3)
        data = {name: rng.standard_normal(64) for name in ("AccV", "AccML", "AccAP")}
        for name in nan_channels:
            data[name][:nan_count] = np.nan
        return Window("s", 0, data, 0, 0.0)

    def test_uses_best_channel(self):
        """Test that the top-ranked channel answers when it is functional."""
        prediction, channel = infer_with_fallback(self.ranking, self.window(), loader=self.loader)

        assert channel == "AccV"
        assert prediction in (0, 1)
        assert self.loaded == ["AccV.fogw"]

    def test_falls_back(self):
        """Test that a masked channel is skipped without loading its model."""
        _, channel = infer_with_fallback(self.ranking, self.window(["AccV"]), loader=self.loader)

        assert channel == "AccML"
        assert self.loaded == ["AccML.fogw"]

    def test_last_resort(self):
        """Test that the lowest-ranked channel is used when the others are masked."""
        _, channel = infer_with_fallback(self.ranking, self.window(["AccV", "AccML"]), loader=self.loader)
        assert channel == "AccAP"

    def test_all_failed(self):
        """Test that a window without any functional channel fails."""
        with pytest.raises(AllChannelsFailed) as info:
            infer_with_fallback(self.ranking, self.window(["AccV", "AccML", "AccAP"]), loader=self.loader)

        assert info.value.exit_code == 3
        assert self.loaded == []

    def test_matches_direct_prediction(self):
        """Test that fallback inference agrees with the model used."""
        w = self.window(["AccV"])
        prediction, _ = infer_with_fallback(self.ranking, w, loader=self.loader)

        assert prediction == int(self.models["AccML"].predict_tensors([window_tensor(w, "AccML", 8)])[0])

    def test_interpolates_small_gaps(self):
        """Test that a tolerance lets a channel with a short gap answer."""
        w = self.window(["AccV"], nan_count=2)
        _, strict = infer_with_fallback(self.ranking, w, loader=self.loader)
        _, tolerant = infer_with_fallback(self.ranking, w, max_missing_fraction=0.05, loader=self.loader)

        assert strict == "AccML"
        assert tolerant == "AccV"

    def test_fill_missing(self):
        """Test linear interpolation with nearest-value edges."""
        assert fill_missing(np.array([1.0, np.nan, 3.0])).tolist() == [1.0, 2.0, 3.0]
        assert fill_missing(np.array([np.nan, 2.0, 4.0])).tolist() == [2.0, 2.0, 4.0]
