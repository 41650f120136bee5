"""Tests for atomic result writing."""

import json

import numpy as np
import pandas as pd

from spatial_dr.output import (
    atomic_write_frame,
    atomic_write_json,
    atomic_write_text,
    dumps_json,
    result_document,
    strip_timestamp,
)


class TestAtomicWrites:
    """Test writes through temporary files."""

    def test_creates_parents_and_leaves_no_temporaries(self, tmp_path):
        """Test the final file exists and no .tmp files remain."""
        target = tmp_path / "nested" / "out.txt"
        atomic_write_text(target, "hello\n")
        assert target.read_text(encoding="utf-8") == "hello\n"
        assert [p.name for p in target.parent.iterdir()] == ["out.txt"]

    def test_replaces_existing(self, tmp_path):
        """Test that a rewrite replaces the whole file."""
        target = tmp_path / "out.txt"
        atomic_write_text(target, "a much longer first version\n")
        atomic_write_text(target, "short\n")
        assert target.read_text(encoding="utf-8") == "short\n"

    def test_frame_floats_round_trip(self, tmp_path):
        """Test that CSV floats reload bit for bit."""
        values = np.random.default_rng(0).standard_normal(20) * 1e3
        path = atomic_write_frame(pd.DataFrame({"v": values}), tmp_path / "f.csv")
        reloaded = pd.read_csv(path, float_precision="round_trip")["v"].to_numpy()
        np.testing.assert_array_equal(reloaded, values)


class TestJson:
    """Test canonical JSON."""

    def test_numpy_and_non_finite(self):
        """Test numpy values serialize and non-finite floats become null."""
        text = dumps_json({"b": np.float64(np.inf), "a": np.arange(3), "c": float("nan")})
        assert json.loads(text) == {"a": [0, 1, 2], "b": None, "c": None}
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("\n")

    def test_result_document_timestamp(self, tmp_path):
        """Test that only the timestamp differs between two documents."""
        first = result_document([{"effect": 1.0}], {"seed": 0})
        second = result_document([{"effect": 1.0}], {"seed": 0})
        assert "created_at" in first["metadata"]
        assert strip_timestamp(first) == strip_timestamp(second)
        path = atomic_write_json(first, tmp_path / "results.json")
        assert json.loads(path.read_text(encoding="utf-8"))["results"] == [{"effect": 1.0}]
