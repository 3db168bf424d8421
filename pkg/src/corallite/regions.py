"""Connected-component labelling, region moments and region matching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ._validation import as_bool_mask, check_connectivity, check_same_shape

_STRUCTURES = {
    4: ndi.generate_binary_structure(2, 1),
    8: ndi.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class LabeledMask:
    labels: np.ndarray
    region_count: int
    connectivity: int = 8

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class RegionProps:
    """Shape statistics of one labelled region.

    ``orientation`` is the angle of the major axis measured from the column
    axis, in ``(-pi/2, pi/2]``. ``bbox`` is ``(min_row, min_col, max_row,
    max_col)`` with exclusive maxima. ``coords`` lists the region's pixels
    as (row, col) pairs in raster order.
    """

    label: int
    area: int
    centroid: tuple
    major_axis_len: float
    minor_axis_len: float
    orientation: float
    bbox: tuple
    coords: np.ndarray = None

    def to_dict(self):
        return {
            "label": int(self.label),
            "area": int(self.area),
            "centroid": [float(self.centroid[0]), float(self.centroid[1])],
            "major": float(self.major_axis_len),
            "minor": float(self.minor_axis_len),
            "orientation": float(self.orientation),
            "bbox": [int(v) for v in self.bbox],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            label=int(d.get("label", 0)),
            area=int(d["area"]),
            centroid=tuple(float(v) for v in d["centroid"]),
            major_axis_len=float(d["major"]),
            minor_axis_len=float(d["minor"]),
            orientation=float(d["orientation"]),
            bbox=tuple(d.get("bbox", ())),
        )


def label_components(mask, connectivity=8):
    """Label connected foreground regions.

    Labels are numbered in raster-scan order of each region's first pixel.
    """
    connectivity = check_connectivity(connectivity)
    fg = as_bool_mask(mask)
    labels, count = ndi.label(fg, structure=_STRUCTURES[connectivity])
    if count:
        flat = labels.ravel()
        present, first = np.unique(flat, return_index=True)
        order = np.argsort(first[present > 0], kind="stable")
        lut = np.zeros(count + 1, dtype=labels.dtype)
        lut[present[present > 0][order]] = np.arange(1, count + 1, dtype=labels.dtype)
        labels = lut[labels]
    return LabeledMask(labels.astype(np.int32, copy=False), int(count), connectivity)


def moments_to_ellipse(cov_rr, cov_cc, cov_rc):
    """Convert second central moments to (major, minor, orientation).

    Axis lengths are full lengths scaled so that a solid ellipse recovers its
    own axes: ``4 * sqrt(eigenvalue)``.
    """
    half_trace = 0.5 * (cov_rr + cov_cc)
    disc = math.sqrt(max(0.25 * (cov_cc - cov_rr) ** 2 + cov_rc * cov_rc, 0.0))
    l1 = half_trace + disc
    l2 = max(half_trace - disc, 0.0)
    theta = 0.5 * math.atan2(2.0 * cov_rc + 0.0, (cov_cc - cov_rr) + 0.0)
    if theta <= -math.pi / 2:
        theta += math.pi
    return 4.0 * math.sqrt(l1), 4.0 * math.sqrt(l2), theta


def _props_from_coords(label, coords):
    rows = coords[:, 0].astype(np.float64)
    cols = coords[:, 1].astype(np.float64)
    area = coords.shape[0]
    cr = math.fsum(rows) / area
    cc = math.fsum(cols) / area
    dr = rows - cr
    dc = cols - cc
    major, minor, theta = moments_to_ellipse(
        float(np.dot(dr, dr)) / area, float(np.dot(dc, dc)) / area, float(np.dot(dr, dc)) / area)
    bbox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    return RegionProps(int(label), int(area), (cr, cc), major, minor, theta, bbox, coords)


def region_props(labeled):
    """Per-region area, centroid, ellipse axes and orientation, ordered by label."""
    labels = labeled.labels
    if labeled.region_count == 0:
        return []
    objects = ndi.find_objects(labels)
    props = []
    for label, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        local = np.argwhere(labels[sl] == label)
        coords = local + np.array([sl[0].start, sl[1].start])
        props.append(_props_from_coords(label, coords))
    return props


def _overlap_table(pred_labels, truth_labels, n_pred, n_truth):
    idx = pred_labels.astype(np.int64) * (n_truth + 1) + truth_labels
    counts = np.bincount(idx.ravel(), minlength=(n_pred + 1) * (n_truth + 1))
    return counts.reshape(n_pred + 1, n_truth + 1)


def match_regions(pred, truth, return_distance=False):
    """Match each predicted region to a truth region.

    A predicted region takes the truth region it overlaps most (ties broken
    by centroid distance, then label). Without any overlap it takes the truth
    region with the nearest centroid. With no truth regions it is unmatched.

    Returns a dict ``pred_label -> truth_label or None``; with
    ``return_distance=True`` also a dict of matched centroid distances.
    """
    check_same_shape(pred.labels, truth.labels)
    matches = {}
    distances = {}
    if pred.region_count == 0:
        return (matches, distances) if return_distance else matches
    pred_props = region_props(pred)
    truth_props = region_props(truth)
    if not truth_props:
        matches = {p.label: None for p in pred_props}
        return (matches, distances) if return_distance else matches

    table = _overlap_table(pred.labels, truth.labels, pred.region_count, truth.region_count)
    t_cent = np.array([t.centroid for t in truth_props])
    t_labels = np.array([t.label for t in truth_props])
    for p in pred_props:
        dist = np.hypot(t_cent[:, 0] - p.centroid[0], t_cent[:, 1] - p.centroid[1])
        overlap = table[p.label, t_labels]
        # lexsort: last key is primary
        order = np.lexsort((t_labels, dist, -overlap)) if overlap.max() > 0 \
            else np.lexsort((t_labels, dist))
        best = order[0]
        matches[p.label] = int(t_labels[best])
        distances[p.label] = float(dist[best])
    return (matches, distances) if return_distance else matches
