"""Classical threshold segmenter and ingestion of external probability maps.

The segmenter is a deterministic stand-in for a learned model so the rest of
the pipeline can run without network weights. It makes no attempt to match
learned-model accuracy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage as ndi
from skimage.filters import threshold_otsu
from skimage.morphology import disk
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_raster, check_scalar
from .volume_io import MaskSlice, read_grayscale


@dataclass(frozen=True)
class SegParams:
    """Baseline segmentation settings.

    ``threshold`` is either ``"otsu"`` or a fixed intensity. With
    ``invert=True`` pixels at or below the threshold are foreground.
    """

    invert: bool = True
    blur_sigma: float = 0.5
    threshold: object = "otsu"
    min_area: int = 20
    opening_radius: int = 1

    def __post_init__(self):
        check_scalar(self.blur_sigma, "blur_sigma", min_val=0)
        check_scalar(self.min_area, "min_area", min_val=0, integer=True)
        check_scalar(self.opening_radius, "opening_radius", min_val=0, integer=True)
        if self.threshold != "otsu":
            check_scalar(self.threshold, "threshold")

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("invert", "blur_sigma", "threshold", "min_area",
                                   "opening_radius") if k in d}
        return cls(**known)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


def remove_small_regions(mask, min_area, connectivity=8):
    """Drop connected components with fewer than ``min_area`` pixels."""
    if min_area <= 1 or not mask.any():
        return mask
    structure = ndi.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, n = ndi.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def _blurred(image, params):
    img = as_raster(image).astype(np.float64)
    if params.blur_sigma > 0:
        img = ndi.gaussian_filter(img, params.blur_sigma, mode="nearest")
    return img


def slice_threshold(image, params=None):
    """Intensity threshold ``segment_slice`` would use on ``image``.

    Returns ``None`` for a constant image under Otsu. Passing the result as a
    fixed threshold lets tiles of one slice share a single global cut.
    """
    params = params or SegParams()
    if params.threshold != "otsu":
        return float(params.threshold)
    img = _blurred(image, params)
    if img.size == 0 or img.min() == img.max():
        return None
    return float(threshold_otsu(img))


def segment_slice(image, params=None, slice_index=0):
    """Blur, threshold, optionally invert, open and size-filter one slice."""
    params = params or SegParams()
    img = _blurred(image, params)
    if params.threshold == "otsu":
        if img.size == 0 or img.min() == img.max():
            # degenerate histogram
            return MaskSlice(np.zeros(img.shape, dtype=bool), slice_index)
        thresh = threshold_otsu(img)
    else:
        thresh = float(params.threshold)
    mask = img <= thresh if params.invert else img > thresh

    if params.opening_radius > 0:
        mask = ndi.binary_opening(mask, structure=disk(params.opening_radius).astype(bool))
    mask = remove_small_regions(mask, params.min_area)
    return MaskSlice(mask, slice_index)


def ingest_probability_map(path):
    """Read an 8- or 16-bit grayscale file as probabilities in ``[0, 1]``."""
    arr = read_grayscale(path)
    return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)


class BaselineSegmenter(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`segment_slice`.

    ``transform`` accepts one slice ``(H, W)`` or a stack ``(n, H, W)`` and
    returns boolean masks of the same shape. ``fit`` only validates the
    parameters; nothing is learned.
    """

    def __init__(self, invert=True, blur_sigma=0.5, threshold="otsu", min_area=20,
                 opening_radius=1):
        self.invert = invert
        self.blur_sigma = blur_sigma
        self.threshold = threshold
        self.min_area = min_area
        self.opening_radius = opening_radius

    def fit(self, X=None, y=None):
        self.params_ = SegParams(self.invert, self.blur_sigma, self.threshold,
                                 self.min_area, self.opening_radius)
        return self

    def transform(self, X):
        if not hasattr(self, "params_"):
            self.fit()
        X = np.asarray(getattr(X, "slices", X))
        if X.ndim == 2:
            return segment_slice(X, self.params_).raster
        if X.ndim != 3:
            raise ValueError(f"expected (H, W) or (n, H, W), got shape {X.shape}")
        return np.stack([segment_slice(s, self.params_).raster for s in X])
