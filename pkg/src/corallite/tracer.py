"""Cross-slice linking of regions into corallite tracks.

Each region in slice ``n`` looks for a counterpart in slice ``n - 1``. A
pair is admissible when the centroid distance is below ``gamma`` and the
pixel IoU exceeds ``beta``; admissible pairs are assigned one-to-one,
greedily by descending IoU. Unmatched regions open new tracks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_bool_mask, check_connectivity, check_scalar
from .regions import RegionProps, label_components, region_props

GAMMA_UNITS = ("normalised", "pixels")


@dataclass(frozen=True)
class TraceParams:
    """Linking thresholds.

    With ``gamma_units="normalised"`` the distance gate is ``gamma`` times the
    mean major-axis length of the two regions being compared.
    """

    gamma: float = 0.3
    gamma_units: str = "normalised"
    beta: float = 0.3
    min_track_len: int = 1
    connectivity: int = 8

    def __post_init__(self):
        check_scalar(self.gamma, "gamma", min_val=0, include_min=False)
        check_scalar(self.beta, "beta", min_val=0, max_val=1)
        check_scalar(self.min_track_len, "min_track_len", min_val=1, integer=True)
        check_connectivity(self.connectivity)
        units = {"normalized": "normalised", "px": "pixels"}.get(self.gamma_units,
                                                                 self.gamma_units)
        if units not in GAMMA_UNITS:
            raise ValueError(f"gamma_units must be one of {GAMMA_UNITS}, got {self.gamma_units!r}")
        object.__setattr__(self, "gamma_units", units)

    def distance_gate(self, a, b):
        if self.gamma_units == "pixels":
            return self.gamma
        return self.gamma * 0.5 * (a.major_axis_len + b.major_axis_len)


@dataclass
class Track:
    track_id: int
    sections: list = field(default_factory=list)
    status: str = "open"

    def __len__(self):
        return len(self.sections)

    @property
    def first_slice(self):
        return self.sections[0][0]

    @property
    def last_slice(self):
        return self.sections[-1][0]

    def to_dict(self):
        out = []
        for z, p in self.sections:
            out.append({
                "slice": int(z),
                "centroid": [float(p.centroid[0]), float(p.centroid[1])],
                "major": float(p.major_axis_len),
                "minor": float(p.minor_axis_len),
                "orientation": float(p.orientation),
                "area": int(p.area),
            })
        return {"id": int(self.track_id), "status": self.status, "sections": out}

    @classmethod
    def from_dict(cls, d):
        sections = [(int(s["slice"]), RegionProps(
            label=0, area=int(s["area"]), centroid=tuple(s["centroid"]),
            major_axis_len=float(s["major"]), minor_axis_len=float(s["minor"]),
            orientation=float(s["orientation"]), bbox=())) for s in d["sections"]]
        return cls(int(d["id"]), sections, d.get("status", "closed"))


def _pixel_keys(p):
    return p.coords[:, 0].astype(np.int64) * (1 << 32) + p.coords[:, 1]


def _bbox_overlap(a, b):
    return not (a.bbox[2] <= b.bbox[0] or b.bbox[2] <= a.bbox[0]
                or a.bbox[3] <= b.bbox[1] or b.bbox[3] <= a.bbox[1])


def region_iou(a, b):
    """Pixel-set IoU of two regions (requires ``coords``)."""
    if a.bbox and b.bbox and not _bbox_overlap(a, b):
        return 0.0
    inter = np.intersect1d(_pixel_keys(a), _pixel_keys(b), assume_unique=True).size
    return inter / (a.area + b.area - inter)


def candidate_pairs(curr, prev, params):
    """Admissible ``(iou, distance, curr_idx, prev_idx)`` tuples."""
    pairs = []
    for i, c in enumerate(curr):
        for j, p in enumerate(prev):
            d = math.hypot(c.centroid[0] - p.centroid[0], c.centroid[1] - p.centroid[1])
            if not d < params.distance_gate(c, p):
                continue
            iou = region_iou(c, p)
            if iou > params.beta:
                pairs.append((iou, d, i, j))
    return pairs


def match_slice_pair(curr, prev, params=None):
    """Link regions of the current slice to regions of the previous one.

    Returns a dict ``curr_index -> prev_index or None``.
    """
    params = params or TraceParams()
    pairs = candidate_pairs(curr, prev, params)
    pairs.sort(key=lambda t: (-t[0], t[1], curr[t[2]].label, prev[t[3]].label))
    result = dict.fromkeys(range(len(curr)))
    used_prev = set()
    for _, _, i, j in pairs:
        if result[i] is None and j not in used_prev:
            result[i] = j
            used_prev.add(j)
    return result


def trace_all(masks, params):
    """Like :func:`trace_stack` but returns ``(kept, dropped)`` tracks."""
    tracks = []
    open_by_region = {}
    prev_props = []
    prev_index = None
    shape = None
    for pos, m in enumerate(masks):
        z = int(getattr(m, "slice_index", pos))
        fg = as_bool_mask(m)
        if shape is None:
            shape = fg.shape
        elif fg.shape != shape:
            raise ValueError(f"mask for slice {z} has shape {fg.shape}, expected {shape}")
        if prev_index is not None and z != prev_index + 1:
            raise ValueError(f"slice indices must be consecutive: {prev_index} -> {z}")
        props = region_props(label_components(fg, params.connectivity))
        links = match_slice_pair(props, prev_props, params) if prev_props else \
            dict.fromkeys(range(len(props)))
        next_open = {}
        for i, p in enumerate(props):
            j = links[i]
            if j is None:
                track = Track(len(tracks), [])
                tracks.append(track)
            else:
                track = open_by_region[j]
            track.sections.append((z, p))
            next_open[i] = track
        continued = {id(t) for t in next_open.values()}
        for t in open_by_region.values():
            if id(t) not in continued:
                t.status = "closed"
        open_by_region = next_open
        prev_props = props
        prev_index = z
    kept = [t for t in tracks if len(t) >= params.min_track_len]
    dropped = [t for t in tracks if len(t) < params.min_track_len]
    return kept, dropped


def trace_stack(masks, params=None):
    """Trace regions through consecutive slice masks in one forward pass.

    Tracks shorter than ``params.min_track_len`` are omitted; use
    :class:`SliceTracer` to inspect them.
    """
    kept, _ = trace_all(masks, params or TraceParams())
    return kept


def _majority_ids(track, instance_labels):
    ids = []
    for z, p in track.sections:
        truth = instance_labels[z][p.coords[:, 0], p.coords[:, 1]]
        truth = truth[truth > 0]
        ids.append(int(np.bincount(truth).argmax()) if truth.size else None)
    return ids


def track_purity(tracks, truth):
    """Fraction of sections whose dominant truth tube is their track's majority tube.

    ``truth`` is a :class:`~corallite.phantom.PhantomTruth` or an instance
    label volume. Sections overlapping no tube never count as pure.
    """
    labels = getattr(truth, "instance_labels", truth)
    total = 0
    pure = 0
    for track in tracks:
        ids = _majority_ids(track, labels)
        total += len(ids)
        valid = [i for i in ids if i is not None]
        if not valid:
            continue
        _, counts = np.unique(valid, return_counts=True)
        pure += int(counts.max())
    return pure / total if total else 0.0


def tracks_to_json(tracks, path, params=None, dropped=()):
    data = {
        "params": None if params is None else {
            "gamma": params.gamma, "gamma_units": params.gamma_units, "beta": params.beta,
            "min_track_len": params.min_track_len, "connectivity": params.connectivity},
        "tracks": [t.to_dict() for t in tracks],
        "dropped": [t.to_dict() for t in dropped],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def tracks_from_json(path):
    with open(path) as fh:
        data = json.load(fh)
    return [Track.from_dict(d) for d in data["tracks"]]


class SliceTracer(BaseEstimator):
    """Estimator interface to :func:`trace_stack`.

    ``fit`` takes a sequence of slice masks (or a boolean volume) and stores
    ``tracks_`` and ``dropped_tracks_``. ``fit_predict`` returns a volume
    where each pixel holds its track id + 1 (0 for background and for
    regions in dropped tracks).
    """

    def __init__(self, gamma=0.3, gamma_units="normalised", beta=0.3, min_track_len=1,
                 connectivity=8):
        self.gamma = gamma
        self.gamma_units = gamma_units
        self.beta = beta
        self.min_track_len = min_track_len
        self.connectivity = connectivity

    def _params(self):
        return TraceParams(self.gamma, self.gamma_units, self.beta, self.min_track_len,
                           self.connectivity)

    def fit(self, X, y=None):
        self.params_ = self._params()
        self.tracks_, self.dropped_tracks_ = trace_all(list(X), self.params_)
        self.n_tracks_ = len(self.tracks_)
        return self

    def fit_predict(self, X, y=None):
        masks = list(X)
        self.fit(masks)
        shape = as_bool_mask(masks[0]).shape if masks else (0, 0)
        first = getattr(masks[0], "slice_index", 0) if masks else 0
        out = np.zeros((len(masks),) + shape, dtype=np.int32)
        for track in self.tracks_:
            for z, p in track.sections:
                out[z - first, p.coords[:, 0], p.coords[:, 1]] = track.track_id + 1
        return out
