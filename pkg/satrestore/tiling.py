"""Splitting measurements into overlapping tiles and blending the restored tiles.

Tiles are laid out with a stride of ``tile_size - overlap``; the last tile along each axis is moved back to end at the
image border. Each tile is processed together with a margin of the surrounding measurement, wrapping around the image
border like every circular operator of the package, and the margin is cropped from the outputs.

Each restored tile is weighted by a raised-cosine ramp of length ``overlap`` along the edges it shares with a
neighbour, and the weighted tiles are normalized by the accumulated weights.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from satrestore.errors import ConfigError
from satrestore.imaging import as_image

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid

__all__ = ("THREADS_VARIABLE", "Tile", "TilingConfig", "plan_tiles", "process_tiled", "worker_count")

logger = logging.getLogger(__name__)

THREADS_VARIABLE = "SATRESTORE_THREADS"
"""Environment variable capping the number of tile workers."""


@dataclass(frozen=True)
class TilingConfig:
    """Tiling parameters, in pixels of the restored image.

    Attributes
    ----------
    tile_size : int, optional
        Size of the square tiles. Defaults to `None`, a single tile covering the whole image.
    overlap : int
        Overlap between neighbouring tiles. Defaults to 32.
    jobs : int, optional
        Number of tile workers. Defaults to the number of CPUs, capped by ``SATRESTORE_THREADS``.
    margin : int, optional
        Context processed on each side of a tile and cropped afterwards. Only axes split into several tiles get a
        margin. Defaults to the overlap.
    """

    tile_size: int | None = None
    overlap: int = 32
    jobs: int | None = None
    margin: int | None = None

    def __post_init__(self):
        if self.overlap < 0:
            raise ConfigError(f"The overlap must be non-negative, got {self.overlap}.")
        if self.margin is not None and self.margin < 0:
            raise ConfigError(f"The margin must be non-negative, got {self.margin}.")
        if self.tile_size is not None and self.tile_size <= self.overlap:
            raise ConfigError(f"The tile size {self.tile_size} must exceed the overlap {self.overlap}.")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"The number of jobs must be positive, got {self.jobs}.")

    @property
    def context(self) -> int:
        """The margin, defaulting to the overlap."""
        return self.overlap if self.margin is None else self.margin

    def validate(self, scale: int, multiple_of: int = 1) -> None:
        """Check that tiles and their margins map to whole measurement pixels and whole model blocks.

        Raises
        ------
        ConfigError
            If the tile size or the margin is not divisible by `scale` and `multiple_of`, or the overlap by `scale`.
        """
        if self.overlap % scale:
            raise ConfigError(f"The overlap {self.overlap} must be divisible by the scale {scale}.")
        if self.tile_size is not None and (self.tile_size % scale or self.tile_size % multiple_of):
            raise ConfigError(
                f"The tile size {self.tile_size} must be divisible by the scale {scale} and by {multiple_of}."
            )
        if self.tile_size is not None and (self.context % scale or self.context % multiple_of):
            raise ConfigError(
                f"The margin {self.context} must be divisible by the scale {scale} and by {multiple_of}."
            )


@dataclass(frozen=True)
class Tile:
    """A tile of the measurement.

    Attributes
    ----------
    index : int
        Position of the tile in row-major order; also the index of its random substream.
    rows, cols : slice
        Extent of the tile in the measurement.
    shared : tuple[bool, bool, bool, bool]
        Whether the top, bottom, left and right edges are shared with a neighbouring tile.
    margin : tuple[int, int]
        Context rows and columns processed on each side of the tile, in measurement pixels. Defaults to none.
    """

    index: int
    rows: slice
    cols: slice
    shared: tuple[bool, bool, bool, bool]
    margin: tuple[int, int] = (0, 0)

    def image_slices(self, scale: int) -> tuple[slice, slice]:
        """Extent of the tile in the restored image."""
        return (
            slice(self.rows.start * scale, self.rows.stop * scale),
            slice(self.cols.start * scale, self.cols.stop * scale),
        )

    def crop(self, values: NDArray[np.float64], scale: int) -> NDArray[np.float64]:
        """Remove the margin from an output of the tile with its margin."""
        rows, cols = self.margin[0] * scale, self.margin[1] * scale
        return values[rows : values.shape[0] - rows, cols : values.shape[1] - cols]


def _starts(length: int, tile: int, stride: int) -> list[int]:
    if tile >= length:
        return [0]
    return [*range(0, length - tile, stride), length - tile]


def plan_tiles(measurement_shape: tuple[int, int], scale: int, cfg: TilingConfig) -> list[Tile]:
    """Lay out the tiles of a measurement of shape `measurement_shape`."""
    height, width = measurement_shape

    if cfg.tile_size is None:
        return [Tile(0, slice(0, height), slice(0, width), (False, False, False, False))]

    tile = cfg.tile_size // scale
    stride = (cfg.tile_size - cfg.overlap) // scale

    row_starts = _starts(height, tile, stride)
    col_starts = _starts(width, tile, stride)
    tile_height, tile_width = min(tile, height), min(tile, width)

    context = cfg.context // scale
    margin = (context if len(row_starts) > 1 else 0, context if len(col_starts) > 1 else 0)

    tiles = []
    for i, top in enumerate(row_starts):
        for j, left in enumerate(col_starts):
            shared = (i > 0, i < len(row_starts) - 1, j > 0, j < len(col_starts) - 1)
            tiles.append(
                Tile(len(tiles), slice(top, top + tile_height), slice(left, left + tile_width), shared, margin)
            )

    return tiles


def _ramp(length: int, overlap: int, *, rising: bool, falling: bool) -> NDArray[np.float64]:
    weights = np.ones(length)
    ramp_length = min(overlap, length)

    if ramp_length:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp_length) + 0.5) / ramp_length)
        if rising:
            weights[:ramp_length] = np.minimum(weights[:ramp_length], ramp)
        if falling:
            weights[length - ramp_length :] = np.minimum(weights[length - ramp_length :], ramp[::-1])

    return weights


def blend_window(tile: Tile, scale: int, overlap: int) -> NDArray[np.float64]:
    """Blending weights of a restored tile: raised-cosine ramps on shared edges, 1 elsewhere."""
    rows, cols = tile.image_slices(scale)
    top, bottom, left, right = tile.shared

    vertical = _ramp(rows.stop - rows.start, overlap, rising=top, falling=bottom)
    horizontal = _ramp(cols.stop - cols.start, overlap, rising=left, falling=right)

    return np.outer(vertical, horizontal)


def worker_count(jobs: int | None = None) -> int:
    """Number of tile workers: `jobs`, or the number of CPUs, capped by ``SATRESTORE_THREADS`` when it is set.

    Raises
    ------
    ConfigError
        If ``SATRESTORE_THREADS`` is not a positive integer.
    """
    count = jobs or os.cpu_count() or 1
    cap = os.environ.get(THREADS_VARIABLE)

    if cap is not None:
        try:
            cap = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_VARIABLE} must be a positive integer, got '{cap}'.") from None
        if cap < 1:
            raise ConfigError(f"{THREADS_VARIABLE} must be a positive integer, got {cap}.")
        count = min(count, cap)

    return count


def process_tiled(
    y: ImageGrid | ArrayLike,
    scale: int,
    cfg: TilingConfig,
    process: Callable[[NDArray[np.float64], Tile], dict[str, NDArray[np.float64]]],
) -> dict[str, NDArray[np.float64]]:
    """Process a measurement tile by tile and blend the results.

    Parameters
    ----------
    y : ImageGrid | ArrayLike
        The measurement.
    scale : int
        Ratio between the size of the outputs and of the measurement.
    cfg : TilingConfig
        Tiling parameters.
    process : Callable
        Called with each measurement tile, margin included, and its `Tile`; returns named outputs of the size of its
        input times `scale`. It must be safe to call from several threads.

    Returns
    -------
    dict[str, np.ndarray]
        The blended outputs.
    """
    y = as_image(y)
    tiles = plan_tiles(y.shape, scale, cfg)
    workers = min(worker_count(cfg.jobs), len(tiles))
    logger.info("Processing %d tiles with %d workers", len(tiles), workers)

    margin_rows, margin_cols = tiles[0].margin
    padded = np.pad(y, ((margin_rows, margin_rows), (margin_cols, margin_cols)), mode="wrap")

    def run(tile: Tile) -> dict[str, NDArray[np.float64]]:
        window = padded[
            tile.rows.start : tile.rows.stop + 2 * margin_rows, tile.cols.start : tile.cols.stop + 2 * margin_cols
        ]
        return {name: tile.crop(values, scale) for name, values in process(window, tile).items()}

    if workers == 1:
        results = [run(tile) for tile in tiles]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, tiles))

    output_shape = (y.shape[0] * scale, y.shape[1] * scale)
    accumulated: dict[str, NDArray[np.float64]] = {}
    total_weight = np.zeros(output_shape)

    for tile, result in zip(tiles, results):
        rows, cols = tile.image_slices(scale)
        weights = blend_window(tile, scale, cfg.overlap)
        total_weight[rows, cols] += weights

        for name, values in result.items():
            if name not in accumulated:
                accumulated[name] = np.zeros(output_shape)
            accumulated[name][rows, cols] += weights * values

    return {name: values / total_weight for name, values in accumulated.items()}
