"""Binary container for named f32 arrays.

Layout: the magic string "HSSG1", then zero or more records until EOF.
Each record is
    u32  byte length of the utf-8 name
    ...  name bytes
    u32  rank
    u64  dims[rank]
    f32  payload, little-endian, row-major
All integers are little-endian. Round-trips are bit-exact.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"HSSG1"


def save_tensors(path, named: dict):
    """Write arrays sorted by name so identical contents give identical bytes."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(named):
            arr = np.ascontiguousarray(np.asarray(named[name], dtype=np.float32))
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint file: {path}")
    return buf


def load_tensors(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"not a checkpoint file (bad magic): {path}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"truncated checkpoint file: {path}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, path))
            count = 1
            for d in dims:
                count *= d
            payload = _read_exact(f, 4 * count, path)
            arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
            if name in out:
                raise DataError(f"duplicate record {name!r} in {path}")
            out[name] = arr
    return out
