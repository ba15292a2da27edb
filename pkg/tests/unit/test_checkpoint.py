"""
Unit tests for the MSPC checkpoint container
"""

import struct

import numpy as np
import pytest

from src.core.errors import CheckpointError
from src.lm.checkpoint import (
    MAGIC,
    check_config_hash,
    lm_metadata,
    load_checkpoint,
    read_sidecar,
    save_checkpoint,
    sidecar_path,
)
from src.lm.config import LmConfig


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    return {
        "reparam.w1": rng.normal(size=(4, 4)).astype(np.float32),
        "prompt.encode": rng.normal(size=(2, 16)).astype(np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }


class TestContainer:
    """Binary layout and reading back."""

    def test_values_survive(self, tmp_path, arrays):
        """Test that every entry comes back with its shape and values."""
        path = save_checkpoint(tmp_path / "a.mspc", arrays)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for name, array in arrays.items():
            assert loaded[name].dtype == np.float32
            np.testing.assert_array_equal(loaded[name], array)

    def test_header_layout(self, tmp_path, arrays):
        """Test magic, version and entry count at the start of the file."""
        path = save_checkpoint(tmp_path / "a.mspc", arrays)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<II", raw[4:12]) == (1, 3)
        # entries are sorted, so the first name is "prompt.encode"
        (name_len,) = struct.unpack("<H", raw[12:14])
        assert raw[14 : 14 + name_len] == b"prompt.encode"

    def test_file_size(self, tmp_path):
        """Test the byte count of a single-entry container."""
        path = save_checkpoint(tmp_path / "a.mspc", {"w": np.zeros((3, 5), np.float32)})
        header = 4 + 8
        entry = 2 + 1 + 2 + 4 * 2 + 4 * 15
        assert path.stat().st_size == header + entry

    def test_float64_stored_as_float32(self, tmp_path):
        """Test that wider inputs are narrowed on write."""
        path = save_checkpoint(tmp_path / "a.mspc", {"w": np.array([0.1, 0.2])})
        np.testing.assert_array_equal(load_checkpoint(path)["w"], np.float32([0.1, 0.2]))

    def test_bad_magic(self, tmp_path):
        """Test that a foreign file is refused."""
        path = tmp_path / "bad.mspc"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path, arrays):
        """Test that an unknown format version is refused."""
        path = save_checkpoint(tmp_path / "a.mspc", arrays)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 7)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 7"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, arrays):
        """Test that a cut-off payload is reported."""
        path = save_checkpoint(tmp_path / "a.mspc", arrays)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, arrays):
        """Test that extra data after the last entry is reported."""
        path = save_checkpoint(tmp_path / "a.mspc", arrays)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Test that a missing path raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nothing.mspc")


class TestSidecar:
    """JSON configuration next to the container."""

    def test_written_next_to_container(self, tmp_path, arrays):
        """Test sidecar naming and contents."""
        config = LmConfig(d_model=32)
        path = save_checkpoint(tmp_path / "lm.mspc", arrays, lm_metadata(config, kind="lm"))
        assert sidecar_path(path) == tmp_path / "lm.json"
        meta = read_sidecar(path)
        assert meta["kind"] == "lm"
        assert meta["lm"]["d_model"] == 32
        assert LmConfig.from_dict(meta["lm"]) == config

    def test_missing_sidecar(self, tmp_path, arrays):
        """Test that read_sidecar requires the JSON document."""
        path = save_checkpoint(tmp_path / "lm.mspc", arrays)
        with pytest.raises(CheckpointError, match="sidecar"):
            read_sidecar(path)

    def test_config_hash_check(self):
        """Test that prompts only pair with a backbone of the same shape."""
        meta = lm_metadata(LmConfig())
        check_config_hash(meta, LmConfig(init_std=0.5), "p.mspc")
        with pytest.raises(CheckpointError, match="config hash"):
            check_config_hash(meta, LmConfig(n_layers=3), "p.mspc")
