"""Reading and writing rasters and kernels.

Three formats are supported, selected by file suffix:

``.f32r``
    The magic bytes ``F32R``, the little-endian ``uint32`` height and width, then ``height * width`` little-endian
    ``float32`` values in row-major order. Values are stored as they are, without normalization.
``.png``
    16-bit grayscale PNG holding 12-bit digital counts.
``.pgm``
    Binary (P5) portable graymap holding 12-bit digital counts.

Digital counts ``d`` map to normalized values ``d / 4095`` on read, with counts above 4095 clamped; normalized values
``x`` are written as ``round(x * 4095)`` clamped to [0, 4095].
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image

from satrestore.errors import DataError
from satrestore.imaging import DIGITAL_MAX, ImageGrid, Kernel, as_image

if TYPE_CHECKING:
    from os import PathLike

    from numpy.typing import ArrayLike, NDArray

__all__ = (
    "IMAGE_SUFFIXES",
    "read_f32r",
    "write_f32r",
    "read_image",
    "write_image",
    "read_kernel",
    "write_kernel",
)

F32R_MAGIC = b"F32R"
_F32R_HEADER = struct.Struct("<4sII")

IMAGE_SUFFIXES = (".f32r", ".png", ".pgm")


def read_f32r(path: str | PathLike) -> NDArray[np.float64]:
    """Read an F32R raster as a float64 array.

    Raises
    ------
    DataError
        If the file does not start with the F32R magic bytes, or if it is truncated.
    """
    raw = Path(path).read_bytes()

    if len(raw) < _F32R_HEADER.size:
        raise DataError(f"{path} is too short to be an F32R raster.")

    magic, height, width = _F32R_HEADER.unpack_from(raw)

    if magic != F32R_MAGIC:
        raise DataError(f"{path} is not an F32R raster: got magic bytes {magic!r}.")

    expected = _F32R_HEADER.size + 4 * height * width
    if len(raw) < expected:
        raise DataError(f"{path} is truncated: expected {expected} bytes, got {len(raw)}.")

    values = np.frombuffer(raw, dtype="<f4", count=height * width, offset=_F32R_HEADER.size)

    return values.reshape(height, width).astype(np.float64)


def write_f32r(path: str | PathLike, x: ImageGrid | ArrayLike) -> None:
    """Write a two-dimensional array as an F32R raster."""
    x = as_image(x)

    with open(path, "wb") as f:
        f.write(_F32R_HEADER.pack(F32R_MAGIC, x.shape[0], x.shape[1]))
        f.write(x.astype("<f4").tobytes())


def _read_pgm_counts(path: Path) -> NDArray[np.int64]:
    raw = path.read_bytes()

    tokens: list[bytes] = []
    position = 0

    # Header: magic, width, height, maxval, separated by whitespace, with optional comments
    while len(tokens) < 4:
        while position < len(raw) and raw[position : position + 1].isspace():
            position += 1
        if raw[position : position + 1] == b"#":
            while position < len(raw) and raw[position : position + 1] not in (b"\n", b"\r"):
                position += 1
            continue

        start = position
        while position < len(raw) and not raw[position : position + 1].isspace():
            position += 1

        if start == position:
            raise DataError(f"{path} has an incomplete PGM header.")

        tokens.append(raw[start:position])

    position += 1  # single whitespace after maxval

    if tokens[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM file: got magic {tokens[0]!r}.")

    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"  # noqa: PLR2004
    count = width * height

    if len(raw) - position < count * np.dtype(dtype).itemsize:
        raise DataError(f"{path} is truncated.")

    return np.frombuffer(raw, dtype=dtype, count=count, offset=position).reshape(height, width).astype(np.int64)


def _write_pgm_counts(path: Path, counts: NDArray[np.uint16]) -> None:
    header = f"P5\n{counts.shape[1]} {counts.shape[0]}\n{DIGITAL_MAX}\n".encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        f.write(counts.astype(">u2").tobytes())


def read_image(path: str | PathLike) -> ImageGrid:
    """Read an image file, dispatching on its suffix.

    Parameters
    ----------
    path : str | PathLike
        Path to an ``.f32r``, ``.png`` or ``.pgm`` file.

    Returns
    -------
    ImageGrid
        The normalized image.

    Raises
    ------
    DataError
        If the suffix is not supported or the file cannot be decoded.
    FileNotFoundError
        If the file does not exist.
    """
    path = Path(path)
    suffix = path.suffix.lower()

    if suffix == ".f32r":
        return ImageGrid(read_f32r(path))

    if suffix == ".png":
        with Image.open(path) as image:
            counts = np.asarray(image).astype(np.int64)
        if counts.ndim != 2:
            raise DataError(f"{path} is not a single-band image.")
        return ImageGrid.from_counts(counts)

    if suffix == ".pgm":
        return ImageGrid.from_counts(_read_pgm_counts(path))

    raise DataError(f"Unsupported image format '{suffix}', expected one of {', '.join(IMAGE_SUFFIXES)}.")


def write_image(path: str | PathLike, x: ImageGrid | ArrayLike) -> None:
    """Write an image file, dispatching on its suffix.

    F32R files store the values as they are; PNG and PGM files store 12-bit digital counts.

    Raises
    ------
    DataError
        If the suffix is not supported.
    """
    path = Path(path)
    suffix = path.suffix.lower()

    if suffix == ".f32r":
        write_f32r(path, x)
    elif suffix in (".png", ".pgm"):
        counts = ImageGrid(as_image(x)).to_counts()
        if suffix == ".png":
            Image.fromarray(counts).save(path)
        else:
            _write_pgm_counts(path, counts)
    else:
        raise DataError(f"Unsupported image format '{suffix}', expected one of {', '.join(IMAGE_SUFFIXES)}.")


def read_kernel(path: str | PathLike, *, normalize: bool = True) -> Kernel:
    """Read a kernel stored as an F32R raster."""
    return Kernel.from_array(read_f32r(path), normalize=normalize)


def write_kernel(path: str | PathLike, kernel: Kernel) -> None:
    """Write a kernel as an F32R raster."""
    write_f32r(path, kernel.taps)
