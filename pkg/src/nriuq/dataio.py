"""Binary trajectory dataset files (``.tuld``).

Layout, all little-endian::

    magic           4 bytes  b"TULD"
    version         u32      FORMAT_VERSION
    n_traj          u32
    n_particles     u32
    n_steps         u32
    effective_dt    f64
    normalization   4 x f64  (x, y, vx, vy)
    then per trajectory:
      springs       packed bits (MSB first) of the row-major strict upper triangle
      charges       packed bits (MSB first), one per particle
      states        f32 [n_steps, n_particles, 4] ordered (x, y, vx, vy)
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from nriuq.dynamics import Dataset

MAGIC = b"TULD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIId4d")


class DatasetFormatError(ValueError):
    pass


def _sizes(n: int, t: int) -> tuple[int, int, int]:
    n_pairs = n * (n - 1) // 2
    return (n_pairs + 7) // 8, (n + 7) // 8, t * n * 4 * 4


def write_dataset(path: str | Path, ds: Dataset) -> None:
    """Write atomically: the final name only appears once the file is complete."""
    path = Path(path)
    m, t, n, _ = ds.states.shape
    iu = np.triu_indices(n, k=1)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, m, n, t, float(ds.effective_dt),
                          *map(float, ds.normalization))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            for i in range(m):
                fh.write(np.packbits(ds.springs[i][iu]).tobytes())
                fh.write(np.packbits(ds.charges[i]).tobytes())
                fh.write(ds.states[i].astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path: str | Path, split: str | None = None) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, m, n, t, eff_dt, *norm = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    sb, cb, stb = _sizes(n, t)
    rec = sb + cb + stb
    if len(buf) != _HEADER.size + m * rec:
        raise DatasetFormatError(f"{path}: expected {_HEADER.size + m * rec} bytes, found {len(buf)}")
    iu = np.triu_indices(n, k=1)
    springs = np.zeros((m, n, n), dtype=bool)
    charges = np.zeros((m, n), dtype=bool)
    states = np.empty((m, t, n, 4), dtype=np.float64)
    off = _HEADER.size
    raw = np.frombuffer(buf, dtype=np.uint8)
    for i in range(m):
        upper = np.unpackbits(raw[off:off + sb], count=len(iu[0])).astype(bool)
        springs[i][iu] = upper
        springs[i] = springs[i] | springs[i].T
        off += sb
        charges[i] = np.unpackbits(raw[off:off + cb], count=n).astype(bool)
        off += cb
        states[i] = np.frombuffer(buf, dtype="<f4", count=t * n * 4, offset=off).reshape(t, n, 4)
        off += stb
    if split is None:
        split = path.stem
    return Dataset(split, states, springs, charges, np.array(norm), eff_dt)


def load_splits(data_dir: str | Path, splits=("train", "valid", "test")) -> dict[str, Dataset]:
    data_dir = Path(data_dir)
    return {s: read_dataset(data_dir / f"{s}.tuld", s) for s in splits}
