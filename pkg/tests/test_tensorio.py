"""Tensor file format: round trips and malformed-header rejection."""

import json

import numpy as np
import pytest

from metricforge.errors import BadHeader, IoFailure
from metricforge.tensorio import file_sha256, read_tensor, write_tensor


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    arr = np.random.default_rng(0).normal(size=(5, 7)).astype(dtype)
    path = tmp_path / "t.mft"
    info = write_tensor(path, arr)
    assert info["shape"] == [5, 7]
    back = read_tensor(path)
    assert back.dtype == arr.dtype
    assert np.array_equal(
        back.view(np.uint8), arr.view(np.uint8)), "payload bytes changed"


def test_header_echoes_shape(tmp_path):
    arr = np.zeros((8, 16), dtype=np.float32)
    path = tmp_path / "t.mft"
    write_tensor(path, arr)
    assert read_tensor(path).shape == (8, 16)


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        read_tensor(tmp_path / "nope.mft")


def _write_raw(tmp_path, header: dict, payload: bytes):
    path = tmp_path / "bad.mft"
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(payload)
    return path


def test_bad_magic(tmp_path):
    path = _write_raw(tmp_path, {"magic": "zzz", "version": 1,
                                 "dtype": "float32", "shape": [1]}, b"\0" * 4)
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_bad_version(tmp_path):
    path = _write_raw(tmp_path, {"magic": "mftensor", "version": 99,
                                 "dtype": "float32", "shape": [1]}, b"\0" * 4)
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_bad_dtype(tmp_path):
    path = _write_raw(tmp_path, {"magic": "mftensor", "version": 1,
                                 "dtype": "int8", "shape": [1]}, b"\0")
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_bad_shape(tmp_path):
    path = _write_raw(tmp_path, {"magic": "mftensor", "version": 1,
                                 "dtype": "float32", "shape": [0, 2]}, b"")
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = _write_raw(tmp_path, {"magic": "mftensor", "version": 1,
                                 "dtype": "float32", "shape": [2, 2]}, b"\0" * 9)
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_not_json_header(tmp_path):
    path = tmp_path / "bad.mft"
    path.write_bytes(b"not a header\n\0\0\0\0")
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_no_newline(tmp_path):
    path = tmp_path / "bad.mft"
    path.write_bytes(b"\x00\x01\x02")
    with pytest.raises(BadHeader):
        read_tensor(path)


def test_sha256_detects_flip(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.mft"
    write_tensor(path, arr)
    before = file_sha256(path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert file_sha256(path) != before
