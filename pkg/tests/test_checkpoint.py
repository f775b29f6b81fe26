import json
import os
import struct

import numpy as np
import pytest

from poseur.checkpoint import load_checkpoint, save_checkpoint
from poseur.errors import FormatError


def test_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b.c": np.array(2.5), "empty": np.zeros((0, 3))}
    path = tmp_path / "m.bin"
    save_checkpoint(path, tensors, {"step": 7})
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": 7}
    for k, v in tensors.items():
        assert loaded[k].dtype == np.float64
        np.testing.assert_array_equal(loaded[k], v)


def test_layout_is_little_endian_header_then_payload(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.array([1.0, -2.0])})
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw)
    header = json.loads(raw[8 : 8 + hlen])
    assert header["format_version"] == 1
    assert np.frombuffer(raw[8 + hlen :], dtype="<f8").tolist() == [1.0, -2.0]


def test_no_temporary_files_left(tmp_path):
    save_checkpoint(tmp_path / "m.bin", {"x": np.ones(3)})
    assert os.listdir(tmp_path) == ["m.bin"]


def test_wrong_version_rejected(tmp_path):
    path = tmp_path / "m.bin"
    header = json.dumps({"format_version": 99, "metadata": {}, "tensors": []}).encode()
    path.write_bytes(struct.pack("<Q", len(header)) + header)
    with pytest.raises(FormatError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, 20, -4])
def test_truncated_file_rejected(tmp_path, cut):
    path = tmp_path / "m.bin"
    save_checkpoint(path, {"x": np.ones(4)})
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        load_checkpoint(path)
