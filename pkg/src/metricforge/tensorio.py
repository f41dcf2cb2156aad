"""Single-tensor file format shared by feature ingestion and checkpoints.

Layout: one JSON header line (UTF-8, ending in ``\\n``) followed by the raw
tensor payload, C-order, little-endian. The header declares dtype and shape
so a file is self-describing; checkpoint index files additionally record the
payload offset and a sha256 checksum of the whole file.

    {"magic": "mftensor", "version": 1, "dtype": "float32", "shape": [8, 16]}
    <raw bytes>
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import BadHeader, IoFailure

MAGIC = "mftensor"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == np.dtype(dt.str[1:]):
            return name
    raise BadHeader(f"unsupported tensor dtype {arr.dtype}")


def write_tensor(path: str | Path, arr: np.ndarray) -> dict:
    """Write ``arr`` to ``path``; returns the header dict plus offset/nbytes."""
    path = Path(path)
    name = dtype_name(arr)
    header = {"magic": MAGIC, "version": FORMAT_VERSION, "dtype": name,
              "shape": list(arr.shape)}
    head_bytes = (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(head_bytes)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write tensor file {path}: {exc}") from exc
    return {**header, "offset": len(head_bytes), "nbytes": len(payload)}


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file; raises BadHeader on any malformed header or size."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read tensor file {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise BadHeader(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadHeader(f"{path}: header is not JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise BadHeader(f"{path}: bad magic")
    if header.get("version") != FORMAT_VERSION:
        raise BadHeader(f"{path}: unsupported format version {header.get('version')!r}")
    if header.get("dtype") not in _DTYPES:
        raise BadHeader(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise BadHeader(f"{path}: bad shape {shape!r}")
    dt = _DTYPES[header["dtype"]]
    payload = raw[nl + 1:]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise BadHeader(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.str[1:], copy=True)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
