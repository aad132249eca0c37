"""
Unit tests for window and image archives.
"""

import numpy as np
import pytest

from fogpipe.core.archive import (
    GAF_FILE,
    MANIFEST,
    WINDOWS_FILE,
    find_window,
    load_gaf_archive,
    load_window_archive,
    read_manifest,
    save_gaf_archive,
    save_window_archive,
)
from fogpipe.core.errors import ContainerError, MissingWindowKey
from fogpipe.core.gaf import transform_window_set
from fogpipe.core.synthetic import synthetic_windows


class TestWindowArchive:
    """Test cases for raw window archives."""

    def test_round_trip(self, temp_dir):
        """Test that windows, labels and masks survive storage exactly."""
        ws = synthetic_windows(12, window_len=32, seed=2, n_subjects=3, split="test")
        ws.windows[4].data["AccML"][5] = np.nan
        ws.windows[4].channel_mask["AccML"] = False
        save_window_archive(ws, temp_dir / "test")
        again = load_window_archive(temp_dir / "test")

        assert again.split == "test"
        assert [w.key for w in again] == [w.key for w in ws]
        assert again.labels.tolist() == ws.labels.tolist()
        for a, b in zip(again, ws):
            assert a.channel_mask == b.channel_mask
            for name in b.data:
                assert np.array_equal(a.data[name], b.data[name], equal_nan=True)

    def test_file_layout(self, temp_dir):
        """Test the manifest columns and the array size."""
        ws = synthetic_windows(5, window_len=16, seed=0, n_subjects=2)
        save_window_archive(ws, temp_dir)

        manifest = read_manifest(temp_dir)
        assert list(manifest.columns) == ["subject_id", "start_index", "label", "fog_fraction", "channel_mask"]
        assert manifest["channel_mask"].tolist() == ["111"] * 5
        assert (temp_dir / WINDOWS_FILE).stat().st_size == 5 * 3 * 16 * 8

    def test_rewrite_is_identical(self, temp_dir):
        """Test that writing the same set twice gives identical files."""
        ws = synthetic_windows(6, window_len=16, seed=1)
        save_window_archive(ws, temp_dir / "a")
        save_window_archive(load_window_archive(temp_dir / "a"), temp_dir / "b")
        for name in (MANIFEST, WINDOWS_FILE):
            assert (temp_dir / "a" / name).read_bytes() == (temp_dir / "b" / name).read_bytes()

    def test_find_window(self):
        """Test lookups by key."""
        ws = synthetic_windows(4, window_len=16, n_subjects=2)
        assert find_window(ws, ("S01", 16)).key == ("S01", 16)
        with pytest.raises(MissingWindowKey):
            find_window(ws, ("S01", 17))

    def test_missing_manifest(self, temp_dir):
        """Test that a directory without a manifest is rejected."""
        with pytest.raises(ContainerError):
            load_window_archive(temp_dir)

    def test_corrupt_size(self, temp_dir):
        """Test that an array file of the wrong size is rejected."""
        save_window_archive(synthetic_windows(3, window_len=16), temp_dir)
        with open(temp_dir / WINDOWS_FILE, "ab") as f:
            f.write(b"\0" * 8)
        with pytest.raises(ContainerError):
            load_window_archive(temp_dir)


class TestGafArchive:
    """Test cases for encoded image archives."""

    def test_round_trip(self, temp_dir):
        """Test that planes and masks survive storage exactly."""
        ws = synthetic_windows(6, window_len=32, seed=3, n_subjects=2, split="val")
        ws.windows[1].data["AccAP"][0] = np.nan
        ws.windows[1].channel_mask["AccAP"] = False
        gs = transform_window_set(ws, 8)
        save_gaf_archive(gs, temp_dir / "val")
        again = load_gaf_archive(temp_dir / "val")

        assert again.split == "val" and again.image_size == 8
        assert again.keys == gs.keys
        assert again.labels.tolist() == gs.labels.tolist()
        assert again.masks["AccAP"].tolist() == gs.masks["AccAP"].tolist()
        for name in gs.planes:
            assert np.array_equal(again.planes[name], gs.planes[name])
        assert (temp_dir / "val" / GAF_FILE).stat().st_size == 6 * 3 * 8 * 8 * 4
