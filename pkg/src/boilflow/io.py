"""PHS1 binary file format for phase screen sequences.

Layout (little endian):

* magic ``b"PHS1"``
* u32 ``N_T``, u32 ``M``, u32 ``N``
* f64 ``delta`` (meters/pixel), f64 ``fs`` (Hz)
* ``N_T`` frames of ``M x N`` f32, row major; NaN encodes masked pixels.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import ScreenSequence

MAGIC = b"PHS1"
_HEADER = struct.Struct("<4sIIIdd")


def write_phs1(path, seq: ScreenSequence) -> None:
    """Write a sequence to a PHS1 file."""
    n_t, m, n = seq.frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n_t, m, n, float(seq.delta), float(seq.fs)))
        f.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def read_phs1(path) -> ScreenSequence:
    """Read a PHS1 file into a :class:`ScreenSequence` (frames as float64)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError(f"{path}: truncated PHS1 header")
        magic, n_t, m, n, delta, fs = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        count = n_t * m * n
        data = np.fromfile(f, dtype="<f4", count=count)
    if data.size != count:
        raise ValueError(f"{path}: expected {count} samples, file holds {data.size}")
    frames = data.reshape(n_t, m, n).astype(np.float64)
    return ScreenSequence(frames, delta, fs)
