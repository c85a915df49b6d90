"""Dense float32 tensor with an optional gradient buffer, plus checkpoint IO.

The checkpoint format is a flat binary container: the magic string
``OTOCKPT1``, a little-endian uint32 array count, then per array its
uint32 name length, UTF-8 name, uint32 rank, uint32 extents and the raw
little-endian float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"OTOCKPT1"


class Tensor:
    """N-dimensional float32 buffer with a same-shape gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, with_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = np.zeros_like(self.data) if with_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), with_grad=self.grad is not None)
        if self.grad is not None:
            out.grad[...] = self.grad
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write named float32 arrays to `path` in the checkpoint container format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint container back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n, offset, what):
        if offset + n > len(blob):
            raise FormatError(
                f"truncated checkpoint: wanted {n} bytes for {what} at offset {offset}",
                offset=offset,
            )
        return blob[offset : offset + n], offset + n

    chunk, pos = need(len(CHECKPOINT_MAGIC), 0, "magic")
    if chunk != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {chunk!r}", offset=0)
    chunk, pos = need(4, pos, "array count")
    (count,) = struct.unpack("<I", chunk)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, pos = need(4, pos, "name length")
        (name_len,) = struct.unpack("<I", chunk)
        chunk, pos = need(name_len, pos, "name")
        name = chunk.decode("utf-8")
        chunk, pos = need(4, pos, "rank")
        (rank,) = struct.unpack("<I", chunk)
        extents = []
        for _ in range(rank):
            chunk, pos = need(4, pos, "extent")
            extents.append(struct.unpack("<I", chunk)[0])
        n_bytes = 4 * int(np.prod(extents, dtype=np.int64))
        chunk, pos = need(n_bytes, pos, f"payload of {name}")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32)
        arrays[name] = arr.reshape(extents)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after checkpoint payload", offset=pos)
    return arrays


def as_array(value) -> np.ndarray:
    """Coerce a Tensor or array-like into a float ndarray without copying float32/64 data."""
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.dtype == np.float64:
        return arr
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_last_dim(x: np.ndarray, expected: int, what: str):
    if x.shape[-1] != expected:
        raise ShapeError(
            f"{what}: input last extent {x.shape[-1]} does not match expected {expected}"
        )
