"""IDX image/label file parsing and writing.

Images: magic 0x00000803, big-endian u32 dims (count, rows, cols), u8 pixels
scaled to [0, 1] on load.  Labels: magic 0x00000801, one u32 count, u8 codes.
Parse errors carry the exact byte offset of the failure.
"""

from __future__ import annotations

import struct

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, path: str, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte {offset})")


def load_idx(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(path, len(data), "file too short for magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGES_MAGIC:
        ndim = 3
    elif magic == LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(path, 0, f"unexpected magic 0x{magic:08x}")
    need = 4 + 4 * ndim
    if len(data) < need:
        raise IdxFormatError(path, len(data), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:need])
    count = int(np.prod(dims))
    if len(data) < need + count:
        raise IdxFormatError(path, len(data),
                             f"truncated payload: expected {need + count} bytes")
    payload = np.frombuffer(data, dtype=np.uint8, count=count, offset=need)
    if magic == IMAGES_MAGIC:
        return payload.reshape(dims).astype(np.float64) / 255.0
    return payload.copy()


def write_idx_images(path: str, images: np.ndarray) -> None:
    """Write u8 images (n, rows, cols); float inputs in [0, 1] are rescaled."""
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", LABELS_MAGIC))
        fh.write(struct.pack(">I", arr.shape[0]))
        fh.write(arr.tobytes())
