"""Loading and saving of slice stacks, binary masks and dataset manifests.

Slices may be PNG or TIFF, 8- or 16-bit grayscale. Masks are always 8-bit
single-channel PNGs holding only 0 and 255.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from ._validation import as_bool_mask

MASK_THRESHOLD = 128
ANNOTATION_KINDS = ("full", "partial-points")
_TIFF_SUFFIXES = {".tif", ".tiff"}


class ImageFormatError(ValueError):
    """Raised when a file decodes to something other than the expected raster type."""


@dataclass(frozen=True)
class SliceStack:
    """An ordered, immutable stack of equally sized grayscale slices.

    ``slices`` has shape ``(n_slices, height, width)``; ``indices`` holds the
    slice index of each plane and is strictly increasing.
    """

    slices: np.ndarray
    slice_spacing: float = 1.0
    pixel_pitch: float = 1.0
    axis_label: str = "growth"
    indices: tuple = None

    def __post_init__(self):
        arr = np.asarray(self.slices)
        if arr.ndim != 3:
            raise ValueError(f"slices must form a 3-D array, got shape {arr.shape}")
        if arr.dtype not in (np.uint8, np.uint16):
            raise ImageFormatError(f"slices must be 8- or 16-bit, got {arr.dtype}")
        if not self.slice_spacing > 0 or not self.pixel_pitch > 0:
            raise ValueError("slice_spacing and pixel_pitch must be positive")
        indices = tuple(range(arr.shape[0])) if self.indices is None else tuple(
            int(i) for i in self.indices)
        if len(indices) != arr.shape[0]:
            raise ValueError("indices length does not match number of slices")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("slice indices must be strictly increasing")
        arr = arr.view()
        arr.flags.writeable = False
        object.__setattr__(self, "slices", arr)
        object.__setattr__(self, "indices", indices)

    def __len__(self):
        return self.slices.shape[0]

    @property
    def shape(self):
        return self.slices.shape[1:]

    def position(self, slice_index):
        """Array position of ``slice_index`` within the stack."""
        try:
            return self.indices.index(int(slice_index))
        except ValueError:
            raise IndexError(f"slice index {slice_index} not in stack") from None


@dataclass(frozen=True)
class MaskSlice:
    raster: np.ndarray
    slice_index: int = 0

    def __post_init__(self):
        raster = as_bool_mask(self.raster, "raster")
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")
        object.__setattr__(self, "raster", raster)
        object.__setattr__(self, "slice_index", int(self.slice_index))

    @property
    def shape(self):
        return self.raster.shape

    def to_uint8(self):
        return np.where(self.raster, 255, 0).astype(np.uint8)


@dataclass
class Manifest:
    """Description of one specimen's slice files and annotations.

    Paths are stored as given in the JSON file and resolved against
    ``root`` (the manifest's directory) when loading.
    """

    specimen_id: str
    axis_label: str
    slice_files: list
    annotation_files: dict = field(default_factory=dict)
    annotation_kind: dict = field(default_factory=dict)
    slice_spacing: float = 1.0
    pixel_pitch: float = 1.0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.annotation_files = {int(k): v for k, v in self.annotation_files.items()}
        self.annotation_kind = {int(k): v for k, v in self.annotation_kind.items()}
        for idx in self.annotation_files:
            if not 0 <= idx < len(self.slice_files):
                raise ValueError(
                    f"annotation slice {idx} outside slice range 0..{len(self.slice_files) - 1}")
            self.annotation_kind.setdefault(idx, "full")
        for idx, kind in self.annotation_kind.items():
            if kind not in ANNOTATION_KINDS:
                raise ValueError(f"unknown annotation kind {kind!r} for slice {idx}")
            if idx not in self.annotation_files:
                raise ValueError(f"annotation kind given for slice {idx} without a file")
        self.root = Path(self.root)

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def full_annotations(self):
        """Slice index -> resolved mask path, for fully annotated slices only."""
        return {i: self.resolve(p) for i, p in sorted(self.annotation_files.items())
                if self.annotation_kind[i] == "full"}

    def to_dict(self):
        return {
            "specimen_id": self.specimen_id,
            "axis_label": self.axis_label,
            "slice_files": [str(p) for p in self.slice_files],
            "annotation_files": {str(k): str(v) for k, v in sorted(self.annotation_files.items())},
            "annotation_kind": {str(k): v for k, v in sorted(self.annotation_kind.items())},
            "slice_spacing": self.slice_spacing,
            "pixel_pitch": self.pixel_pitch,
        }


def load_manifest(path):
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    missing = {"specimen_id", "axis_label", "slice_files"} - data.keys()
    if missing:
        raise ValueError(f"manifest {path} missing fields: {sorted(missing)}")
    return Manifest(
        specimen_id=str(data["specimen_id"]),
        axis_label=str(data["axis_label"]),
        slice_files=list(data["slice_files"]),
        annotation_files=dict(data.get("annotation_files", {})),
        annotation_kind=dict(data.get("annotation_kind", {})),
        slice_spacing=float(data.get("slice_spacing", 1.0)),
        pixel_pitch=float(data.get("pixel_pitch", 1.0)),
        root=path.parent,
    )


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


def read_grayscale(path):
    """Decode a PNG or TIFF file into a 2-D uint8 or uint16 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    if path.suffix.lower() in _TIFF_SUFFIXES:
        arr = tifffile.imread(path)
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I;16B", "I;16L"):
                raise ImageFormatError(f"{path}: expected grayscale image, got mode {im.mode}")
            arr = np.array(im)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected single-channel raster, got shape {arr.shape}")
    if arr.dtype not in (np.uint8, np.uint16):
        raise ImageFormatError(f"{path}: expected 8- or 16-bit data, got {arr.dtype}")
    return arr


def write_grayscale(arr, path):
    arr = np.asarray(arr)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ImageFormatError(f"cannot write dtype {arr.dtype}; use uint8 or uint16")
    path = Path(path)
    if path.suffix.lower() in _TIFF_SUFFIXES:
        tifffile.imwrite(path, arr)
    else:
        Image.fromarray(arr).save(path, format="PNG")


def load_stack(manifest, threads=1):
    """Read every slice listed in ``manifest`` in manifest order."""
    paths = [manifest.resolve(p) for p in manifest.slice_files]
    if not paths:
        raise ValueError("manifest lists no slice files")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"slice file missing: {p}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rasters = list(pool.map(read_grayscale, paths))
    else:
        rasters = [read_grayscale(p) for p in paths]
    first = rasters[0]
    for p, r in zip(paths, rasters):
        if r.shape != first.shape:
            raise ValueError(f"dimension mismatch: {p} is {r.shape}, expected {first.shape}")
    dtype = np.uint16 if any(r.dtype == np.uint16 for r in rasters) else np.uint8
    return SliceStack(
        slices=np.stack(rasters).astype(dtype, copy=False),
        slice_spacing=manifest.slice_spacing,
        pixel_pitch=manifest.pixel_pitch,
        axis_label=manifest.axis_label,
    )


def load_mask(path, slice_index=0):
    """Load an 8-bit mask; pixels >= 128 become foreground."""
    arr = read_grayscale(path)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: masks must be 8-bit, got {arr.dtype}")
    return MaskSlice(arr >= MASK_THRESHOLD, slice_index)


def save_mask(mask, path):
    if not isinstance(mask, MaskSlice):
        mask = MaskSlice(mask)
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    Image.fromarray(mask.to_uint8()).save(path, format="PNG")


def load_points(path):
    """Read a point annotation as an ``(n, 2)`` array of (row, col).

    CSV and JSON files hold explicit coordinates; images mark points with
    non-zero pixels.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        pts = np.loadtxt(path, delimiter=",", ndmin=2)
    elif suffix == ".json":
        with open(path) as fh:
            pts = np.asarray(json.load(fh), dtype=float).reshape(-1, 2)
    else:
        pts = np.argwhere(read_grayscale(path) > 0)
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)


_DIGITS = re.compile(r"(\d+)(?!.*\d)")


def slice_index_from_name(path, default):
    m = _DIGITS.search(Path(path).stem)
    return int(m.group(1)) if m else default


def load_mask_dir(directory):
    """Load every PNG in ``directory`` as masks ordered by slice index."""
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        return []
    masks = [load_mask(f, slice_index_from_name(f, i)) for i, f in enumerate(files)]
    masks.sort(key=lambda m: m.slice_index)
    return masks


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
