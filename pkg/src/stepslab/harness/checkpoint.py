"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic         4 bytes   b"SSNC"
    version       u16       1
    element width u8        4 (float32) or 8 (float64)
    then, until end of file, one record per tensor:
      name length u16
      name        UTF-8 bytes
      rank        u8
      extents     rank x u32
      values      prod(extents) x element width, little-endian, C order

The model/task description needed to rebuild the network is stored next to
the checkpoint as JSON (``<stem>.json``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SSNC"
VERSION = 1
_WIDTH_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = list(tensors.items())
    widths = {a.dtype.itemsize for _, a in arrays}
    if len(widths) > 1:
        raise CheckpointError(f"mixed element widths {sorted(widths)} in one checkpoint")
    width = widths.pop() if widths else 4
    if width not in _WIDTH_DTYPES:
        raise CheckpointError(f"unsupported element width {width}")
    out = bytearray(MAGIC)
    out += struct.pack("<HB", VERSION, width)
    for name, arr in arrays:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_WIDTH_DTYPES[width]).tobytes()
    path.write_bytes(bytes(out))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, width = struct.unpack_from("<HB", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        dtype = _WIDTH_DTYPES.get(width)
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported element width {width}")
        pos = 7
        tensors: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * width
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).astype(
                dtype.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file ({exc})") from None
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else None
    return tensors, meta
