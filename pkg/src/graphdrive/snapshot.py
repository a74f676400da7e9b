"""Binary snapshot container for named arrays plus JSON metadata.

Layout (all integers little-endian):

    magic    8 bytes  b"GDRIVESN"
    version  u32      currently 1
    meta_len u32      length of UTF-8 JSON metadata (sorted keys)
    meta     bytes
    count    u32      number of tensor records
    per record:
        name_len u16, name utf-8
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     u32 * ndim
        data     raw little-endian bytes, C order

Round trips are bit-exact: load(save(x)) returns identical bytes per array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GDRIVESN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_snapshot(path: str | Path, arrays: dict[str, np.ndarray],
                  meta: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"snapshot: unsupported dtype {arr.dtype} for {name!r}")
        name_b = name.encode()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_snapshot(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a snapshot file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(dims)
        off += nbytes
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes after last record")
    return arrays, meta
