"""Minimal reader/writer for single-channel .tsd containers."""
import struct

import numpy as np


def read(path):
    with open(path, "rb") as f:
        head = f.read(16)
        magic, version, fmt, nch, rate = struct.unpack("<4sHBBQ", head)
        if magic != b"TIDM" or version != 1:
            raise SystemExit(f"{path}: not a TIDM v1 container")
        lengths = struct.unpack(f"<{nch}Q", f.read(8 * nch))
        dtype = np.int8 if fmt == 0 else np.float32
        data = np.fromfile(f, dtype=dtype, count=lengths[0])
    mv = data.astype(np.float64) * (40.0 / 128.0) if fmt == 0 else data.astype(np.float64)
    return mv, rate, fmt, data


def write_float(path, mv, rate):
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHBBQ", b"TIDM", 1, 1, 1, rate))
        f.write(struct.pack("<Q", len(mv)))
        f.write(np.asarray(mv, dtype=np.float32).tobytes())


def write_raw(path, data, rate, fmt):
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHBBQ", b"TIDM", 1, fmt, 1, rate))
        f.write(struct.pack("<Q", len(data)))
        f.write(np.asarray(data).tobytes())
