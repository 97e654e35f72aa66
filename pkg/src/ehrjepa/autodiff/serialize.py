"""Flat binary container of named float32 tensors.

Layout (all integers little-endian uint32):
    magic "EJK1" | n_entries | entries...
    entry = name_len | name (utf-8) | rank | dims[rank] | payload (f32 LE)

Optimizer state rides along under reserved "opt/" names, run metadata under
"meta/".
"""

import struct

import numpy as np

MAGIC = b"EJK1"


def write_container(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"not a checkpoint container (bad magic) in {path}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"truncated container {path}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = take(4 * n)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise ValueError(f"trailing bytes in container {path}")
    return out
