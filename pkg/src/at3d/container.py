"""Binary tensor container.

Layout of one record (all integers little-endian)::

    b"AT3D" | version:u16 | dtype:u8 | rank:u8 | extents:u64 * rank | payload

dtype code 0 is float32 and the only code written.  Payload is the
row-major little-endian element buffer.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ContainerError

MAGIC = b"AT3D"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}
_HEAD = struct.Struct("<4sHBB")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise ContainerError("rank above 255 cannot be encoded")
    fh.write(_HEAD.pack(MAGIC, VERSION, 0, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic, version, code, rank = _HEAD.unpack(_read_exact(fh, _HEAD.size))
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


def dumps(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    fh = io.BytesIO(blob)
    arr = read_tensor(fh)
    if fh.read(1):
        raise ContainerError("trailing bytes after tensor record")
    return arr


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write ``data`` to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
