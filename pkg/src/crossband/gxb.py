"""GXB1 tensor files and zip checkpoint bundles.

A GXB1 file is: the 4-byte magic ``GXB1``, a uint32 rank, ``rank`` uint32
dimensions, then the row-major payload as little-endian float32. A checkpoint
bundle is a zip archive holding one ``<name>.gxb`` entry per tensor plus an
``index.json`` mapping each parameter name to its shape.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

MAGIC = b"GXB1"

# fixed zip timestamp so identical bundles are byte-identical
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """Malformed GXB1 payload."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)  # keeps ndim for >=1-d inputs
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError("truncated dimension list")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return data.reshape(shape).astype(np.float64)


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a checkpoint bundle; ``meta`` lands in index.json under "meta"."""
    index = {
        "format": "gxb1-bundle",
        "tensors": {name: list(np.asarray(arr).shape) for name, arr in tensors.items()},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("index.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(index, indent=1, sort_keys=True))
        for name in sorted(tensors):
            info = zipfile.ZipInfo(name + ".gxb", date_time=_ZIP_DATE)
            zf.writestr(info, encode(tensors[name]))
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        tensors = {}
        for name, shape in index["tensors"].items():
            arr = decode(zf.read(name + ".gxb"))
            if list(arr.shape) != list(shape):
                raise FormatError(f"bundle entry {name!r}: shape {arr.shape} != index {shape}")
            tensors[name] = arr
    return tensors, index.get("meta", {})
