"""Named-tensor container.

A single binary file holding named arrays plus a JSON metadata block.
Layout, all little-endian:

    bytes 0..3    magic b"NTC1"
    bytes 4..7    header length H as uint32
    bytes 8..8+H  header: canonical JSON (sorted keys, no whitespace), UTF-8
    then          raw array payloads, row-major, in header order

Header schema::

    {"meta": {...}, "tensors": [{"dtype": "f32", "name": ..., "shape": [...]}]}

Canonical JSON plus fixed payload order makes writes byte-deterministic:
saving the same mapping twice produces identical files, and a load/save round
trip reproduces the original bytes.  Loads are strict: bad magic, truncated
payloads, or trailing bytes are all errors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from ditlab.diffcore.tensor import Tensor

MAGIC = b"NTC1"

_TAG_TO_DTYPE = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_KIND_TO_TAG = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int32): "i32",
    np.dtype(np.int64): "i64",
}


def _coerce(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _KIND_TO_TAG:
        raise TypeError(f"unsupported dtype for container: {arr.dtype}")
    return np.ascontiguousarray(arr)


def save_tensors(
    path: Union[str, Path],
    tensors: Mapping[str, Union[np.ndarray, Tensor]],
    meta: Optional[Mapping] = None,
) -> None:
    """Write named arrays to path.  Mapping order fixes payload order."""
    entries = []
    payloads = []
    for name, value in tensors.items():
        arr = _coerce(value)
        entries.append(
            {
                "name": str(name),
                "dtype": _KIND_TO_TAG[arr.dtype],
                "shape": [int(n) for n in arr.shape],
            }
        )
        payloads.append(arr.astype(_TAG_TO_DTYPE[_KIND_TO_TAG[arr.dtype]], copy=False))
    header = {"meta": dict(meta) if meta else {}, "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in payloads:
            fh.write(arr.tobytes())


def load_tensors(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back: (name -> native-endian array, metadata dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a named-tensor container")
    (header_len,) = struct.unpack("<I", raw[4:8])
    end = 8 + header_len
    if len(raw) < end:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    offset = end
    for entry in header["tensors"]:
        dtype = _TAG_TO_DTYPE.get(entry["dtype"])
        if dtype is None:
            raise ValueError(f"{path}: unknown dtype tag {entry['dtype']!r}")
        shape = tuple(int(n) for n in entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[entry["name"]] = (
            arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        )
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return tensors, header.get("meta", {})
