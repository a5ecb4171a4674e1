"""File formats: the ``TSDQ`` array container, 16-bit PGM export and CSV helpers.

``TSDQ`` layout (all little-endian)::

    4 bytes   magic b"TSDQ"
    u16       format version (1)
    u8        payload kind (0 = image, 1 = sinogram)
    u8        number of dimensions d
    d * u32   dimensions
    ...       row-major float64 values
"""

from __future__ import annotations

import csv
import re
import struct
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

MAGIC = b"TSDQ"
VERSION = 1
KIND_CODES = {"image": 0, "sinogram": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class ContainerError(Exception):
    """Unreadable container; ``path`` names the offending file."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class ContainerFormatError(ContainerError):
    pass


class ContainerTruncatedError(ContainerError):
    pass


class Container(NamedTuple):
    kind: str
    data: np.ndarray


def write_container(path, data: np.ndarray, kind: str = "image") -> None:
    if kind not in KIND_CODES:
        raise ValueError(f"unknown payload kind {kind!r}")
    arr = np.ascontiguousarray(data, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError("payload must be two-dimensional")
    header = MAGIC + struct.pack("<HBB", VERSION, KIND_CODES[kind], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_container(path) -> Container:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        if raw and not MAGIC.startswith(raw[:4]):
            raise ContainerFormatError(path, "bad magic bytes")
        raise ContainerTruncatedError(path, "file ends inside the header")
    if raw[:4] != MAGIC:
        raise ContainerFormatError(path, f"bad magic bytes {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise ContainerFormatError(path, f"unsupported format version {version}")
    if code not in KIND_NAMES:
        raise ContainerFormatError(path, f"unknown payload kind code {code}")
    off = 8 + 4 * ndim
    if len(raw) < off:
        raise ContainerTruncatedError(path, "file ends inside the dimension table")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    n = int(np.prod(dims))
    if len(raw) < off + 8 * n:
        raise ContainerTruncatedError(path, f"expected {n} values, file holds {(len(raw) - off) // 8}")
    if len(raw) > off + 8 * n:
        raise ContainerFormatError(path, "trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
    return Container(KIND_NAMES[code], data)


def export_pgm(x: np.ndarray, path, window: tuple[float, float]) -> None:
    """Binary 16-bit PGM with linear windowing; ties round half to even."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError("window needs lo < hi")
    x = np.asarray(x, dtype=np.float64)
    scaled = np.clip((x - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    pix = np.rint(scaled).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.shape[1]} {x.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw, dtype=dtype, count=w * h, offset=m.end()).reshape(h, w)


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
