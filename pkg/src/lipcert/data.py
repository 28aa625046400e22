"""IDX image/label ingestion (the classic big-endian ubyte format).

Transparently decompresses gzip files.  Pixel bytes are scaled by 1/255 into
[0, 1]; images come back as (N, 1, H, W) float64.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetHandle:
    images: np.ndarray  # (N, 1, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    source: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image/label count mismatch: {len(self.images)} images, "
                f"{len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.source)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_idx(buf: bytes, expected_magic: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise ValueError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise ValueError(
            f"{path}: truncated IDX payload ({len(buf) - header} of {count} bytes)"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Load an images/labels IDX pair; counts must agree."""
    images_u8 = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels_u8 = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    n, h, w = images_u8.shape
    if n != labels_u8.shape[0]:
        raise ValueError(
            f"image/label count mismatch: {n} images, {labels_u8.shape[0]} labels"
        )
    images = images_u8.astype(np.float64).reshape(n, 1, h, w) / 255.0
    return DatasetHandle(images, labels_u8.astype(np.int64), source=str(images_path))


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Write (N, H, W) uint8 images as raw IDX (test fixtures and tooling)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
