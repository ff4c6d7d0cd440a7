"""Preprocessing chain: min-max normalization, MONOCHROME1 inversion, resize.

Images are plain 2-D ``float64`` arrays with values in [0, 1]. Resizing is
separable: each axis gets its own (target x source) weight matrix whose rows
are convex weights, so constants are preserved and outputs never leave [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dicom import Photometric, PixelMatrix
from .errors import MammoscreenError

TARGET_SIZE = 512

# Normalized values are rounded to multiples of 2**-48. On that grid 1 - x is
# exact, so inversion is an exact involution.
GRID = 2.0**48


class ZeroTargetDimension(MammoscreenError, ValueError):
    pass


class PGMError(MammoscreenError):
    pass


def check_normalized(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or 0 in img.shape:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0, 1]")
    return img


def normalize_minmax(m: PixelMatrix | np.ndarray) -> np.ndarray:
    values = np.asarray(m.values if isinstance(m, PixelMatrix) else m, dtype=np.float64)
    if values.ndim != 2 or 0 in values.shape:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {values.shape}")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return np.rint((values - lo) / (hi - lo) * GRID) / GRID


def invert(img: np.ndarray) -> np.ndarray:
    """``1 - img``; exact (and self-inverse) for values on the normalization grid."""
    return 1.0 - np.asarray(img, dtype=np.float64)


def _area_weights(src: int, dst: int) -> np.ndarray:
    # Output cell i covers source interval [i*src/dst, (i+1)*src/dst).
    edges = np.arange(dst + 1) * (src / dst)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def _bilinear_weights(src: int, dst: int) -> np.ndarray:
    # Half-pixel centres, edge samples clamped.
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1)
    left = np.floor(pos).astype(int)
    right = np.minimum(left + 1, src - 1)
    frac = pos - left
    w = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(w, (rows, left), 1.0 - frac)
    np.add.at(w, (rows, right), frac)
    return w


def axis_weights(src: int, dst: int) -> np.ndarray:
    """Resampling matrix for one axis: area average when shrinking, bilinear when growing."""
    if dst == src:
        return np.eye(src)
    if dst < src:
        return _area_weights(src, dst)
    return _bilinear_weights(src, dst)


def resize(img: np.ndarray, target_rows: int = TARGET_SIZE, target_cols: int = TARGET_SIZE) -> np.ndarray:
    if target_rows <= 0 or target_cols <= 0:
        raise ZeroTargetDimension(f"target size {target_rows}x{target_cols}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or 0 in img.shape:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    rows = axis_weights(img.shape[0], target_rows)
    cols = axis_weights(img.shape[1], target_cols)
    out = rows @ img @ cols.T
    # Convex weights can overshoot [0, 1] only by rounding.
    return np.clip(out, 0.0, 1.0)


def preprocess(
    m: PixelMatrix | np.ndarray,
    photometric: Photometric | str,
    size: tuple[int, int] = (TARGET_SIZE, TARGET_SIZE),
) -> np.ndarray:
    """Normalize, invert MONOCHROME1 images, then resize (512x512 by default)."""
    img = normalize_minmax(m)
    if Photometric(photometric) is Photometric.MONOCHROME1:
        img = invert(img)
    return resize(img, *size)


# Portable graymap (binary P5) I/O.


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        tokens.append(data[start:pos])
    # Exactly one whitespace byte separates maxval from the raster.
    return tokens, pos + 1


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (integer array, maxval)."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError("non-numeric PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PGMError(f"bad PGM header {width}x{height} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise PGMError(f"PGM raster has {len(raster)} bytes, expected {expected}")
    values = np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.uint16)
    return values, maxval


def write_pgm(path: str | Path, values: np.ndarray, maxval: int) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} out of range")
    if values.min() < 0 or values.max() > maxval:
        raise ValueError("values exceed maxval")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + values.astype(dtype).tobytes())


def write_normalized_pgm(path: str | Path, img: np.ndarray) -> None:
    """Store a [0, 1] image as a 16-bit graymap."""
    img = check_normalized(img)
    write_pgm(path, np.rint(img * 65535).astype(np.uint16), 65535)
