"""Binary tensor-record framing, shared by checkpoints and dataset files.

Record: u32 LE name length, name bytes (utf-8), u32 LE rank, u32 LE dims,
fp64 LE payload in row-major order. A checkpoint is the magic "D2ETR1"
followed by one record per parameter in creation order; round-trips are
bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"D2ETR1"


def write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    (nlen,) = struct.unpack("<I", head)
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def iter_records(path):
    with open(path, "rb") as fh:
        while True:
            rec = read_record(fh)
            if rec is None:
                return
            yield rec


def save_checkpoint(path, store) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for p in store.parameters():
            write_record(fh, p.name, p.tensor.data)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        state = {}
        while True:
            rec = read_record(fh)
            if rec is None:
                return state
            state[rec[0]] = rec[1]
