"""AOTN binary tensor files and directory checkpoints.

Layout: ``b"AOTN"``, u8 version (1), u8 dtype code (1 = float64), u8 rank,
rank little-endian u64 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InputError
from .tensor import Tensor

MAGIC = b"AOTN"
VERSION = 1
DTYPE_F64 = 1


def tensor_to_bytes(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise InputError("rank above 255 cannot be encoded")
    head = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise InputError("not an AOTN tensor (bad magic)")
    if len(buf) < 7:
        raise InputError("truncated AOTN header")
    version, dtype, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise InputError(f"unsupported AOTN version {version}")
    if dtype != DTYPE_F64:
        raise InputError(f"unsupported AOTN dtype code {dtype}")
    offset = 7 + 8 * rank
    if len(buf) < offset:
        raise InputError("truncated AOTN header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 7)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise InputError("AOTN payload length does not match its extents")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def checksum(arrays: Mapping[str, object]) -> str:
    """SHA-256 over the AOTN encodings of ``arrays`` in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(tensor_to_bytes(arrays[name]))
    return h.hexdigest()


def _fname(name: str) -> str:
    return name.replace("/", "__") + ".aotn"


def save_checkpoint(directory, arrays: Mapping[str, object], manifest: dict) -> None:
    """Write one AOTN file per named array plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, x in arrays.items():
        save_tensor(directory / _fname(name), x)
    manifest = dict(manifest)
    manifest["parameters"] = list(arrays)
    manifest["checksum"] = checksum(arrays)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {name: load_tensor(directory / _fname(name)) for name in manifest["parameters"]}
    if checksum(arrays) != manifest["checksum"]:
        raise InputError(f"checksum mismatch in {directory}")
    return arrays, manifest
