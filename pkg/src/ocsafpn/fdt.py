"""FDT1 binary tensor files and directory checkpoints.

An FDT1 file is: magic ``FDT1``, four little-endian uint32 extents
(b, c, h, w), one precision byte (4 for float32, 8 for float64), then the
row-major little-endian payload.  A checkpoint is a directory of FDT1
files plus a JSON manifest mapping tensor names to files; non-4-D arrays
are stored padded to 4-D with their true shape kept in the manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FDT1"
_HEADER = struct.Struct("<4sIIIIB")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_fdt(path, array: np.ndarray):
    array = np.asarray(array)
    if array.dtype == np.float32:
        tag = 4
    elif array.dtype == np.float64:
        tag = 8
    else:
        raise ValueError(f"FDT1 stores float32/float64 only, got {array.dtype}")
    if array.ndim != 4:
        raise ValueError(f"FDT1 payload must be 4-D, got shape {array.shape}")
    if not all(s >= 1 for s in array.shape):
        raise ValueError(f"FDT1 extents must be positive, got {array.shape}")
    header = _HEADER.pack(MAGIC, *array.shape, tag)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_fdt(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated FDT1 header")
    magic, b, c, h, w, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if tag not in _DTYPES:
        raise ValueError(f"{path}: unknown precision byte {tag}")
    dtype = _DTYPES[tag]
    expected = _HEADER.size + b * c * h * w * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
                         f"expected {expected - _HEADER.size}")
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(b, c, h, w)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def _pad4(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise ValueError(f"cannot store rank-{len(shape)} array in FDT1")
    return (1,) * (4 - len(shape)) + tuple(shape) if shape else (1, 1, 1, 1)


def save_checkpoint(directory, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays as FDT1 files plus a manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for idx, (name, arr) in enumerate(sorted(arrays.items())):
        arr = np.asarray(arr)
        fname = f"t{idx:05d}.fdt"
        write_fdt(directory / fname, arr.reshape(_pad4(arr.shape)))
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": "fdt-checkpoint-v1", "tensors": entries,
                "meta": meta or {}}
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != "fdt-checkpoint-v1":
        raise ValueError(f"{directory}: not a checkpoint manifest")
    arrays = {}
    for name, entry in manifest["tensors"].items():
        arr = read_fdt(directory / entry["file"])
        arrays[name] = arr.reshape(entry["shape"])
    return arrays, manifest.get("meta", {})
