"""MSRNT1 binary tensor files and checkpoint manifests.

Layout: ``b"MSRNT1"``, little-endian u32 rank, ``rank`` little-endian u32
dims, then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MSRNT1"


class TensorFileError(ValueError):
    pass


def write_tensor(path, array) -> None:
    arr = np.asarray(array, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:6] != MAGIC:
        raise TensorFileError(f"{path}: bad magic bytes {raw[:6]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise TensorFileError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 6)
    end = 10 + 4 * rank
    if len(raw) < end:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 10)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - end != 8 * count:
        raise TensorFileError(
            f"{path}: payload holds {len(raw) - end} bytes, shape {tuple(dims)} needs {8 * count}"
        )
    return np.frombuffer(raw, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def save_manifest(directory, tensors: Mapping[str, np.ndarray], roles: Mapping[str, str]) -> None:
    """Write one MSRNT1 file per tensor plus ``manifest.txt`` (name, shape, role)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        write_tensor(directory / f"{name}.msrnt", arr)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{roles.get(name, 'weight')}")
    tmp = directory / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / "manifest.txt")


def load_manifest(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: checkpoint manifest missing")
    tensors, roles = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, role = line.split("\t")
        arr = read_tensor(directory / f"{name}.msrnt")
        expected = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != expected:
            raise TensorFileError(f"{name}: manifest says {expected}, file holds {arr.shape}")
        tensors[name] = arr
        roles[name] = role
    return tensors, roles
