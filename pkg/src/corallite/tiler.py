"""Sliding-window tiling, depth snippets and stitching of tile predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_raster, check_scalar
from .volume_io import MaskSlice

DEFAULT_TILE_SIZE = 224


def _axis_origins(extent, tile_size, step_k):
    origins = list(range(0, extent - tile_size + 1, step_k))
    if origins[-1] + tile_size < extent:
        # clamp the final window to the border instead of padding
        origins.append(extent - tile_size)
    return origins


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile_size: int = DEFAULT_TILE_SIZE
    step_k: int = DEFAULT_TILE_SIZE
    origins: tuple = ()

    def __len__(self):
        return len(self.origins)

    def windows(self):
        """Yield ``(origin, (row_slice, col_slice))`` for each window."""
        t = self.tile_size
        for r, c in self.origins:
            yield (r, c), (slice(r, r + t), slice(c, c + t))

    def coverage(self):
        """Number of windows covering each pixel."""
        counts = np.zeros((self.height, self.width), dtype=np.int32)
        for _, win in self.windows():
            counts[win] += 1
        return counts


def plan_grid(height, width, tile_size=DEFAULT_TILE_SIZE, step_k=DEFAULT_TILE_SIZE):
    """Plan window origins covering a ``height`` x ``width`` slice.

    Per axis the origins are ``0, k, 2k, ...``; if that lattice stops short of
    the border a final window is placed at ``extent - tile_size``.
    """
    check_scalar(tile_size, "tile_size", min_val=1, integer=True)
    check_scalar(step_k, "step_k", min_val=1, max_val=tile_size, integer=True)
    if tile_size > height or tile_size > width:
        raise ValueError(f"tile of size {tile_size} does not fit a {height}x{width} slice")
    rows = _axis_origins(height, tile_size, step_k)
    cols = _axis_origins(width, tile_size, step_k)
    origins = tuple((r, c) for r in rows for c in cols)
    return TileGrid(height, width, tile_size, step_k, origins)


@dataclass(frozen=True)
class Snippet:
    voxels: np.ndarray
    center_slice_index: int
    origin: tuple
    center_annotation: np.ndarray = None
    source_indices: tuple = ()

    def __post_init__(self):
        if self.voxels.ndim != 3 or self.voxels.shape[0] % 2 == 0:
            raise ValueError(f"snippet depth must be odd, got shape {self.voxels.shape}")
        if self.center_annotation is not None and \
                self.center_annotation.shape != self.voxels.shape[1:]:
            raise ValueError("center annotation does not match tile shape")

    @property
    def depth(self):
        return self.voxels.shape[0]

    @property
    def center(self):
        return self.voxels[self.depth // 2]


def snippet_positions(n_slices, center_position, depth):
    """Stack positions feeding a snippet, replicating the edge slices."""
    half = (depth - 1) // 2
    return [min(max(center_position + d, 0), n_slices - 1) for d in range(-half, half + 1)]


def extract_snippet(stack, grid_origin, center_slice_index, depth=5, tile_size=DEFAULT_TILE_SIZE,
                    annotation=None):
    """Cut a ``depth`` x ``tile_size`` x ``tile_size`` block centred on one slice."""
    check_scalar(depth, "depth", min_val=1, integer=True)
    if depth % 2 == 0:
        raise ValueError(f"depth must be odd, got {depth}")
    center = stack.position(center_slice_index)
    r, c = grid_origin
    h, w = stack.shape
    if r < 0 or c < 0 or r + tile_size > h or c + tile_size > w:
        raise ValueError(f"window at {grid_origin} does not fit the {h}x{w} slice")
    positions = snippet_positions(len(stack), center, depth)
    voxels = stack.slices[positions, r:r + tile_size, c:c + tile_size].copy()
    ann = None
    if annotation is not None:
        ann = np.asarray(getattr(annotation, "raster", annotation))[r:r + tile_size, c:c + tile_size]
    return Snippet(voxels, int(center_slice_index), (int(r), int(c)), ann,
                   tuple(stack.indices[p] for p in positions))


def extract_tiles(raster, grid):
    """Stack the grid's windows of a 2-D raster into ``(n_tiles, t, t)``."""
    raster = np.asarray(raster)
    if raster.shape != (grid.height, grid.width):
        raise ValueError(f"raster shape {raster.shape} does not match grid "
                         f"{grid.height}x{grid.width}")
    return np.stack([raster[win] for _, win in grid.windows()])


def stitch_probability(tiles, height, width):
    """Average overlapping tile values into a full ``height`` x ``width`` map."""
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for (r, c), values in tiles:
        values = np.asarray(values, dtype=np.float64)
        th, tw = values.shape
        if r < 0 or c < 0 or r + th > height or c + tw > width:
            raise ValueError(f"tile at {(r, c)} exceeds the {height}x{width} extent")
        total[r:r + th, c:c + tw] += values
        count[r:r + th, c:c + tw] += 1
    if np.any(count == 0):
        missing = int(np.count_nonzero(count == 0))
        raise ValueError(f"{missing} pixels are not covered by any tile")
    return total / count


def stitch(tiles, height, width, slice_index=0):
    """Merge tile rasters into one mask: per-pixel mean, true where >= 0.5."""
    prob = stitch_probability(tiles, height, width)
    return MaskSlice(prob >= 0.5, slice_index)


class SnippetTiler(TransformerMixin, BaseEstimator):
    """Cut slices into grid tiles and stitch tile predictions back.

    Parameters
    ----------
    tile_size : int
        Window edge length in pixels.
    step_k : int
        Stride between window origins; ``step_k < tile_size`` overlaps tiles.
    depth : int
        Odd number of slices per snippet.
    """

    def __init__(self, tile_size=DEFAULT_TILE_SIZE, step_k=DEFAULT_TILE_SIZE, depth=5):
        self.tile_size = tile_size
        self.step_k = step_k
        self.depth = depth

    def fit(self, X, y=None):
        X = np.asarray(getattr(X, "slices", X))
        if X.ndim not in (2, 3):
            raise ValueError(f"expected a slice or a stack, got shape {X.shape}")
        check_scalar(self.depth, "depth", min_val=1, integer=True)
        if self.depth % 2 == 0:
            raise ValueError(f"depth must be odd, got {self.depth}")
        height, width = X.shape[-2:]
        self.grid_ = plan_grid(height, width, self.tile_size, self.step_k)
        return self

    def transform(self, X):
        """Tile a single slice or mask into ``(n_tiles, tile_size, tile_size)``."""
        check_is_fitted(self, "grid_")
        X = np.asarray(X)
        if X.dtype != bool:
            X = as_raster(X, "X")
        elif X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        return extract_tiles(X, self.grid_)

    def inverse_transform(self, X):
        """Stitch ``(n_tiles, tile_size, tile_size)`` predictions into a boolean mask."""
        check_is_fitted(self, "grid_")
        X = np.asarray(X)
        if X.shape[0] != len(self.grid_):
            raise ValueError(f"expected {len(self.grid_)} tiles, got {X.shape[0]}")
        pairs = zip(self.grid_.origins, X)
        return stitch(pairs, self.grid_.height, self.grid_.width).raster

    def snippets(self, stack, center_slice_index, annotation=None):
        check_is_fitted(self, "grid_")
        return [extract_snippet(stack, origin, center_slice_index, self.depth,
                                self.tile_size, annotation)
                for origin in self.grid_.origins]
