import numpy as np
import pytest

from cyclelab import checkpoint
from cyclelab.checkpoint import CorruptCheckpointError


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "conv.bias": rng.normal(size=(4,)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
        "empty_pool": np.zeros((0, 3, 8, 8), dtype=np.float32),
    }


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        meta = {"iteration": 7, "seed": 3, "arch": {"f": 16}}
        arrays = _sample_arrays()
        path = tmp_path / "x.cycd"
        checkpoint.save(path, meta, arrays)
        meta2, arrays2 = checkpoint.load(path)
        assert meta2 == meta
        assert set(arrays2) == set(arrays)
        for name in arrays:
            assert arrays2[name].dtype == np.float32
            assert arrays2[name].shape == arrays[name].shape
            assert np.array_equal(arrays2[name], arrays[name])

    def test_identical_bytes_for_identical_state(self, tmp_path):
        checkpoint.save(tmp_path / "a.cycd", {"k": 1}, _sample_arrays())
        checkpoint.save(tmp_path / "b.cycd", {"k": 1}, _sample_arrays())
        assert (tmp_path / "a.cycd").read_bytes() == (tmp_path / "b.cycd").read_bytes()

    def test_magic_and_version_bytes(self, tmp_path):
        checkpoint.save(tmp_path / "a.cycd", {}, {})
        raw = (tmp_path / "a.cycd").read_bytes()
        assert raw[:4] == b"CYCD"
        assert raw[4] == 1

    def test_non_float32_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="float32"):
            checkpoint.save(tmp_path / "a.cycd", {},
                            {"x": np.zeros(3, dtype=np.float64)})


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.cycd"
        p.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(CorruptCheckpointError, match="magic"):
            checkpoint.load(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "bad.cycd"
        checkpoint.save(p, {}, {})
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError, match="version"):
            checkpoint.load(p)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "t.cycd"
        checkpoint.save(p, {"a": 1}, _sample_arrays())
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            checkpoint.load(p)

    def test_missing_file_is_io_error_not_corruption(self, tmp_path):
        with pytest.raises(OSError):
            checkpoint.load(tmp_path / "nothing.cycd")
