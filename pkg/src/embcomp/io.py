"""Binary tensor files and checkpoint containers.

Single tensor ("MEMT" block):

    bytes 0..3   magic b"MEMT"
    byte  4      dtype code: 0=float64, 1=float32, 2=float16, 3=int8
    byte  5      rank (number of extents)
    then         rank extents, each a little-endian uint64
    then         the payload, little-endian, C row-major order

Checkpoint container: a UTF-8 text header of `key=value` lines terminated by
one empty line, followed by zero or more named blocks. Each named block is a
uint8 name length, the UTF-8 name, then one MEMT tensor.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MEMT"

_DTYPES = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<f2"),
    3: np.dtype("i1"),
}
_CODES = {
    np.dtype("float64"): 0,
    np.dtype("float32"): 1,
    np.dtype("float16"): 2,
    np.dtype("int8"): 3,
}


def write_tensor(fh, arr: np.ndarray) -> None:
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds the format limit")
    fh.write(MAGIC)
    fh.write(bytes([code, arr.ndim]))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(fh) -> np.ndarray:
    head = fh.read(6)
    if len(head) != 6 or head[:4] != MAGIC:
        raise OSError("not a MEMT tensor block")
    code, rank = head[4], head[5]
    if code not in _DTYPES:
        raise OSError(f"unknown dtype code {code}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise OSError("truncated tensor extents")
    shape = tuple(int(x) for x in np.frombuffer(raw, dtype="<u8"))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise OSError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def write_blocks(path, header: dict, tensors: dict) -> None:
    """Write a checkpoint: text header then named MEMT blocks."""
    with open(path, "wb") as fh:
        for key, value in header.items():
            line = f"{key}={value}"
            if "\n" in line or (key and "=" in str(key)):
                raise ValueError(f"illegal header entry {key!r}")
            fh.write(line.encode("utf-8") + b"\n")
        fh.write(b"\n")
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            if not 0 < len(encoded) < 256:
                raise ValueError(f"block name {name!r} must encode to 1..255 bytes")
            fh.write(bytes([len(encoded)]))
            fh.write(encoded)
            write_tensor(fh, arr)


def read_blocks(path):
    """Read a checkpoint; returns (header dict, {name: tensor})."""
    header: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                raise OSError("checkpoint header not terminated")
            line = line.rstrip(b"\n")
            if not line:
                break
            key, sep, value = line.decode("utf-8").partition("=")
            if not sep:
                raise OSError(f"malformed header line {line!r}")
            header[key] = value
        while True:
            nlen = fh.read(1)
            if not nlen:
                break
            name = fh.read(nlen[0]).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return header, tensors
