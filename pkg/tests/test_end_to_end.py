"""
End-to-end learning checks on synthetic windows.

These train real networks for several epochs and are marked slow;
``python run_tests.py --fast`` skips them.
"""

import pytest

from fogpipe.core.evaluation import window_metrics
from fogpipe.core.federated import RoundConfig, partition_clients, run_rounds
from fogpipe.core.gaf import transform_window_set
from fogpipe.core.model import ModelConfig, train
from fogpipe.core.synthetic import synthetic_windows


@pytest.fixture(scope="module")
def synthetic_sets():
    """2000 training and 400 test windows encoded as 64x64 images, the production image size."""
    train_ws = synthetic_windows(2000, window_len=64, seed=11, split="train")
    test_ws = synthetic_windows(400, window_len=64, seed=11, split="test", subject_prefix="T")
    return transform_window_set(train_ws, 64), transform_window_set(test_ws, 64)


@pytest.mark.slow
class TestLearning:
    """The classifier separates the two synthetic classes."""

    def test_centralised(self, synthetic_sets):
        """Test that ten epochs reach 90% accuracy and F1 on held-out windows."""
        train_set, test_set = synthetic_sets
        cfg = ModelConfig(channels=("AccV",), epochs=10, image_size=64, seed=1)
        model = train(cfg, train_set)
        report = window_metrics(model.predict(test_set), test_set.labels)

        assert report.accuracy >= 0.90
        assert report.f1 >= 0.90
        assert model.history[-1].train_loss < model.history[0].train_loss

    def test_federated(self, synthetic_sets):
        """Test that five clients, three rounds of two local epochs reach 85% accuracy."""
        train_set, test_set = synthetic_sets
        cfg = ModelConfig(channels=("AccV",), image_size=64, seed=1)
        shards = partition_clients(train_set, 5, seed=1)
        result = run_rounds(RoundConfig(num_clients=5, local_epochs=2, rounds=3, seed=1), cfg, shards)
        report = window_metrics(result.model.predict(test_set), test_set.labels)

        assert report.accuracy >= 0.85
