"""Binary container shared by model checkpoints and optimizer-state files.

Layout: 4-byte magic, u32 format version, u32 header length + UTF-8 header
text, u32 tensor count, then per tensor: u32 name length, name bytes, u32
rank, u32 dims, and the values as little-endian 8-byte floats. Everything is
little-endian, so a file round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FatalError


def write_container(path: str | Path, magic: bytes, version: int, header: str,
                    tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", version, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def read_container(path: str | Path, magic: bytes, version: int) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FatalError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if blob[:4] != magic:
        raise FatalError(f"bad magic in {path}: expected {magic!r}")
    got_version, header_len = struct.unpack_from("<II", blob, 4)
    if got_version != version:
        raise FatalError(f"unsupported format version {got_version} in {path}")
    off = 12
    header = blob[off:off + header_len].decode("utf-8")
    off += header_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return header, tensors
