"""Binary tensor and weight-container formats.

Tensor file (``MTT1``)::

    b"MTT1" | u32 rank | rank x u64 dims | row-major f32 payload

Weights container (``MTW1``)::

    b"MTW1" | u32 count | count x (u16 name_len | utf-8 name | tensor file)
           | utf-8 JSON config | u32 config byte length

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"MTT1"
WEIGHTS_MAGIC = b"MTW1"


class FormatError(ValueError):
    pass


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(stream, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_weights(path: str | Path, tensors: dict[str, np.ndarray], config: dict) -> None:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    trailer = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(trailer)
    buf.write(struct.pack("<I", len(trailer)))
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weights container")
    (trailer_len,) = struct.unpack("<I", blob[-4:])
    config = json.loads(blob[-4 - trailer_len : -4].decode("utf-8"))
    stream = io.BytesIO(blob[: -4 - trailer_len])
    stream.seek(4)
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, name_len).decode("utf-8")
        tensors[name] = read_tensor(stream)
    return tensors, config
