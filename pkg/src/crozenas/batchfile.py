"""Binary batch files and synthetic class-conditional batches.

Layout (all integers unsigned 32-bit little-endian)::

    b"CRZB" | version | dtype code (1 = float64) | rank | dims[rank]
    | payload (float64 LE, row-major) | label count | labels[count]
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Batch

MAGIC = b"CRZB"
VERSION = 1
DTYPE_F64 = 1


class BatchFormatError(ValueError):
    pass


def encode_batch(batch: Batch) -> bytes:
    img = np.ascontiguousarray(batch.images, dtype="<f8")
    parts = [MAGIC, struct.pack("<III", VERSION, DTYPE_F64, img.ndim),
             struct.pack(f"<{img.ndim}I", *img.shape), img.tobytes(),
             struct.pack("<I", len(batch.labels)),
             np.ascontiguousarray(batch.labels, dtype="<u4").tobytes()]
    return b"".join(parts)


def decode_batch(data: bytes) -> Batch:
    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise BatchFormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != MAGIC:
        raise BatchFormatError("bad magic, not a CRZB batch file")
    version, dtype, rank = struct.unpack("<III", take(12, "header"))
    if version != VERSION:
        raise BatchFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F64:
        raise BatchFormatError(f"unsupported dtype code {dtype}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
    count = int(np.prod(dims)) if dims else 0
    images = np.frombuffer(take(8 * count, "payload"), dtype="<f8").reshape(dims)
    (n_labels,) = struct.unpack("<I", take(4, "label count"))
    if rank < 1 or n_labels != dims[0]:
        raise BatchFormatError(f"label count {n_labels} does not match leading dim {dims[:1]}")
    labels = np.frombuffer(take(4 * n_labels, "labels"), dtype="<u4")
    if pos != len(data):
        raise BatchFormatError(f"{len(data) - pos} trailing bytes")
    try:
        return Batch(images.astype(np.float64), labels.astype(np.int64))
    except ValueError as exc:
        raise BatchFormatError(str(exc)) from None


def read_batch(path) -> Batch:
    with open(path, "rb") as fh:
        return decode_batch(fh.read())


def synthetic_batch(n=8, classes=10, shape=(3, 16, 16), seed=0) -> Batch:
    """Unit-variance Gaussian images with a +1.0 mean shift on a class pattern.

    Class ``y`` shifts channel ``y % C`` over spatial quadrant ``(y // C) % 4``.
    """
    if n < 1 or classes < 1:
        raise ValueError("n and classes must be >= 1")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    images = rng.normal(size=(n, c, h, w))
    hh, hw = max(h // 2, 1), max(w // 2, 1)
    for i, y in enumerate(labels):
        ch, quad = y % c, (y // c) % 4
        r0, c0 = (quad // 2) * hh, (quad % 2) * hw
        images[i, ch, r0:r0 + hh, c0:c0 + hw] += 1.0
    return Batch(images, labels)
