"""Synthetic colony volumes with known per-voxel tube identities.

Tubes are elliptical cross-sections that drift laterally from slice to slice,
surrounded by bright walls on a mid-grey background. Optionally a tube splits
in two, creating a child tube id. The generator keeps its own bookkeeping of
every section so it can serve as ground truth for tracing tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import disk

from ._validation import check_scalar
from .volume_io import Manifest, SliceStack, ensure_dir, save_manifest, save_mask, write_grayscale

INTERIOR_LEVEL = 40.0
WALL_LEVEL = 200.0
BACKGROUND_LEVEL = 120.0
MAX_AXIS_RATIO = 1.5
GROWTH_RATE = 0.2       # px per slice towards the target radius
AXIS_JITTER = 0.1       # px, per slice
TURN_SIGMA = 0.35       # rad, heading random walk per slice
SPIN_SIGMA = 0.03       # rad, in-plane rotation per slice
MIN_BRANCH_IOU = 0.3
MIN_SECTION_RADIUS = 2.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    extent: tuple = (64, 256, 256)
    n_tubes: int = 12
    radius_range: tuple = (5.0, 9.0)
    curvature: float = 1.0
    branch_prob: float = 0.0
    noise_sigma: float = 10.0
    wall_thickness: int = 2

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(int(v) for v in self.extent))
        object.__setattr__(self, "radius_range", tuple(float(v) for v in self.radius_range))
        if len(self.extent) != 3 or min(self.extent) < 1:
            raise ValueError(f"extent must be three positive sizes, got {self.extent}")
        check_scalar(self.n_tubes, "n_tubes", min_val=1, integer=True)
        lo, hi = self.radius_range
        check_scalar(lo, "radius_range.min", min_val=2)
        if hi < lo:
            raise ValueError("radius_range max must be >= min")
        check_scalar(self.curvature, "curvature", min_val=0)
        check_scalar(self.branch_prob, "branch_prob", min_val=0, max_val=0.1, include_max=False)
        check_scalar(self.noise_sigma, "noise_sigma", min_val=0)
        check_scalar(self.wall_thickness, "wall_thickness", min_val=0, integer=True)

    @classmethod
    def from_dict(cls, d):
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})

    def to_dict(self):
        d = asdict(self)
        d["extent"] = list(self.extent)
        d["radius_range"] = list(self.radius_range)
        return d


@dataclass
class PhantomTruth:
    """Ground truth of a generated phantom.

    ``tube_paths[tube_id]`` lists ``(slice, (row, col), radius)`` per slice,
    where the centroid is measured on the rendered section and ``radius`` is
    the section's semi-minor axis. ``parent`` maps child tubes to the tube
    they split from; ``branch_slice`` records the first slice of each child.
    """

    instance_labels: np.ndarray
    tube_paths: dict
    parent: dict
    branch_slice: dict = field(default_factory=dict)

    @property
    def tube_ids(self):
        return sorted(self.tube_paths)

    def branch_events(self):
        """``(child_id, parent_id, slice)`` for each split, in id order."""
        return [(c, p, self.branch_slice[c]) for c, p in sorted(self.parent.items())
                if p is not None]

    def masks(self):
        return self.instance_labels > 0

    def sections_in_slice(self, slice_index):
        return sorted(t for t, path in self.tube_paths.items()
                      if path[0][0] <= slice_index <= path[-1][0])

    def to_json(self):
        return {
            "tube_paths": {
                str(t): [{"slice": s, "centroid": [c[0], c[1]], "radius": r} for s, c, r in path]
                for t, path in sorted(self.tube_paths.items())
            },
            "parent": {str(t): p for t, p in sorted(self.parent.items())},
            "branch_slice": {str(t): s for t, s in sorted(self.branch_slice.items())},
        }


@dataclass
class _Tube:
    tube_id: int
    center: np.ndarray          # (row, col)
    half_u: float               # semi-axis along the orientation direction
    half_v: float               # semi-axis perpendicular to it
    theta: float                # orientation from the column axis
    heading: float
    target_minor: float
    target_ratio: float
    coords: np.ndarray = None   # rendered interior pixels

    def copy(self):
        return _Tube(self.tube_id, self.center.copy(), self.half_u, self.half_v, self.theta,
                     self.heading, self.target_minor, self.target_ratio, self.coords)

    @property
    def minor(self):
        return min(self.half_u, self.half_v)


def rasterize_ellipse(center, half_u, half_v, theta, shape):
    """Pixels ``(row, col)`` whose centres fall inside the ellipse."""
    cr, cc = center
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ex = math.sqrt((half_u * cos_t) ** 2 + (half_v * sin_t) ** 2)
    ey = math.sqrt((half_u * sin_t) ** 2 + (half_v * cos_t) ** 2)
    r0, r1 = max(int(math.floor(cr - ey)), 0), min(int(math.ceil(cr + ey)), shape[0] - 1)
    c0, c1 = max(int(math.floor(cc - ex)), 0), min(int(math.ceil(cc + ex)), shape[1] - 1)
    if r1 < r0 or c1 < c0:
        return np.empty((0, 2), dtype=np.int64)
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    dy = rows - cr
    dx = cols - cc
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    inside = (u / half_u) ** 2 + (v / half_v) ** 2 <= 1.0
    return np.column_stack([rows[inside], cols[inside]]).astype(np.int64)


def _centroid(coords):
    return coords.mean(axis=0)


class _Builder:
    def __init__(self, spec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        _, self.height, self.width = spec.extent
        self.margin = spec.wall_thickness + 1
        self.sep = max(spec.wall_thickness, 1) + 1
        self.sep_struct = disk(self.sep).astype(bool)

    def _in_bounds(self, coords, tube):
        if coords.shape[0] == 0:
            return False
        ext = max(tube.half_u, tube.half_v)
        r, c = tube.center
        m = self.margin
        return (r - ext >= m and c - ext >= m and r + ext <= self.height - 1 - m
                and c + ext <= self.width - 1 - m)

    def _collides(self, coords, occupancy, own_id):
        """True if any other tube's interior lies within ``sep`` pixels."""
        pad = self.sep
        r0, c0 = coords.min(axis=0) - pad
        r1, c1 = coords.max(axis=0) + pad + 1
        r0, c0 = max(r0, 0), max(c0, 0)
        window = occupancy[r0:r1, c0:c1]
        others = (window > 0) & (window != own_id)
        if not others.any():
            return False
        local = np.zeros(window.shape, dtype=bool)
        local[coords[:, 0] - r0, coords[:, 1] - c0] = True
        grown = ndi.binary_dilation(local, structure=self.sep_struct)
        return bool((grown & others).any())

    def _render(self, tube):
        return rasterize_ellipse(tube.center, tube.half_u, tube.half_v, tube.theta,
                                 (self.height, self.width))

    def _accept(self, cand, occupancy):
        coords = self._render(cand)
        if not self._in_bounds(coords, cand) or self._collides(coords, occupancy, cand.tube_id):
            return None
        return coords

    def _new_shape(self):
        lo, hi = self.spec.radius_range
        return float(self.rng.uniform(lo, hi)), float(self.rng.uniform(1.0, MAX_AXIS_RATIO))

    def place_initial(self, occupancy):
        tubes = []
        spec = self.spec
        max_half = spec.radius_range[1] * MAX_AXIS_RATIO
        lo_r = self.margin + max_half
        hi_r, hi_c = self.height - 1 - lo_r, self.width - 1 - lo_r
        if hi_r < lo_r or hi_c < lo_r:
            raise ValueError(f"extent {spec.extent} too small for radius {spec.radius_range[1]}")
        attempts = 0
        while len(tubes) < spec.n_tubes:
            attempts += 1
            if attempts > 2000 * spec.n_tubes:
                raise ValueError(
                    f"could not place {spec.n_tubes} tubes without overlap in extent {spec.extent}")
            minor, ratio = self._new_shape()
            center = np.array([self.rng.integers(math.ceil(lo_r), math.floor(hi_r) + 1),
                               self.rng.integers(math.ceil(lo_r), math.floor(hi_c) + 1)],
                              dtype=np.float64)
            tube = _Tube(len(tubes) + 1, center, minor * ratio, minor,
                         float(self.rng.uniform(-math.pi / 2, math.pi / 2)),
                         float(self.rng.uniform(-math.pi, math.pi)), minor, ratio)
            coords = self._accept(tube, occupancy)
            if coords is None:
                continue
            tube.coords = coords
            occupancy[coords[:, 0], coords[:, 1]] = tube.tube_id
            tubes.append(tube)
        return tubes

    def _toward(self, value, target, jitter):
        step = float(np.clip(target - value, -GROWTH_RATE, GROWTH_RATE))
        return value + step + jitter

    def evolve(self, tube, occupancy):
        """Propose the tube's next section; fall back to the previous one."""
        spec = self.spec
        rng = self.rng
        tube.heading += float(rng.normal(0.0, TURN_SIGMA))
        step = spec.curvature * float(rng.uniform(0.5, 1.0))
        direction = np.array([math.sin(tube.heading), math.cos(tube.heading)])
        minor = max(self._toward(tube.minor, tube.target_minor,
                                 float(rng.normal(0.0, AXIS_JITTER))), MIN_SECTION_RADIUS)
        ratio = float(np.clip(self._toward(max(tube.half_u, tube.half_v) / tube.minor,
                                           tube.target_ratio, 0.0), 1.0, MAX_AXIS_RATIO))
        theta = tube.theta + float(rng.normal(0.0, SPIN_SIGMA))
        if tube.half_u >= tube.half_v:
            half_u, half_v = minor * ratio, minor
        else:
            half_u, half_v = minor, minor * ratio
        prev_centroid = _centroid(tube.coords)

        for scale in (1.0, 0.5, 0.25, 0.0):
            cand = tube.copy()
            cand.center = tube.center + scale * step * direction
            cand.half_u, cand.half_v, cand.theta = half_u, half_v, theta
            coords = self._accept(cand, occupancy)
            if coords is None:
                continue
            if np.hypot(*(_centroid(coords) - prev_centroid)) > spec.curvature + 1e-9:
                continue
            cand.coords = coords
            return cand
        if scale == 0.0:
            # bounce off whatever blocked us
            tube.heading += math.pi
        return tube

    def try_split(self, tube, occupancy, new_id):
        """Split ``tube`` along its long axis; return (parent, child) or None."""
        if tube.half_u >= tube.half_v:
            a, r, theta = tube.half_u, tube.half_v, tube.theta
        else:
            a, r, theta = tube.half_v, tube.half_u, tube.theta + math.pi / 2
        gap = self.sep + 2
        s_len = (a - gap / 2.0) / 2.0
        if s_len < MIN_SECTION_RADIUS:
            return None
        d = s_len + gap / 2.0
        perp = min(r, MAX_AXIS_RATIO * s_len)
        u = np.array([math.sin(theta), math.cos(theta)])
        prev = set(map(tuple, tube.coords))
        halves = []
        for sign, tid in ((1.0, tube.tube_id), (-1.0, new_id)):
            half = tube.copy()
            half.tube_id = tid
            half.center = tube.center + sign * d * u
            half.half_u, half.half_v, half.theta = s_len, perp, theta
            coords = self._render(half)
            if not self._in_bounds(coords, half):
                return None
            inter = len(prev.intersection(map(tuple, coords)))
            if inter / (len(prev) + len(coords) - inter) < MIN_BRANCH_IOU:
                return None
            half.coords = coords
            halves.append(half)
        parent, child = halves
        child.heading = tube.heading + math.pi
        child.target_minor, child.target_ratio = self._new_shape()
        scratch = occupancy.copy()
        scratch[tube.coords[:, 0], tube.coords[:, 1]] = 0
        if self._collides(parent.coords, scratch, parent.tube_id):
            return None
        scratch[parent.coords[:, 0], parent.coords[:, 1]] = parent.tube_id
        if self._collides(child.coords, scratch, child.tube_id):
            return None
        return parent, child


def generate(spec):
    """Render a phantom stack and its ground truth from ``spec``.

    Deterministic for a fixed ``spec.seed``.
    """
    depth, height, width = spec.extent
    builder = _Builder(spec)
    labels = np.zeros((depth, height, width), dtype=np.uint16)
    tubes = builder.place_initial(labels[0])
    paths = {t.tube_id: [] for t in tubes}
    parent = {t.tube_id: None for t in tubes}
    branch_slice = {}
    next_id = len(tubes) + 1

    def record(z, tube):
        c = _centroid(tube.coords)
        paths[tube.tube_id].append((z, (float(c[0]), float(c[1])), float(tube.minor)))

    for tube in tubes:
        record(0, tube)

    for z in range(1, depth):
        occupancy = labels[z]
        occupancy[...] = labels[z - 1]
        updated = []
        for tube in tubes:
            occupancy[tube.coords[:, 0], tube.coords[:, 1]] = 0
            if spec.branch_prob > 0 and builder.rng.random() < spec.branch_prob:
                split = builder.try_split(tube, occupancy, next_id)
                if split is not None:
                    par, child = split
                    for t in (par, child):
                        occupancy[t.coords[:, 0], t.coords[:, 1]] = t.tube_id
                    paths[child.tube_id] = []
                    parent[child.tube_id] = par.tube_id
                    branch_slice[child.tube_id] = z
                    next_id += 1
                    updated.extend([par, child])
                    continue
            new = builder.evolve(tube, occupancy)
            occupancy[new.coords[:, 0], new.coords[:, 1]] = new.tube_id
            updated.append(new)
        tubes = updated
        for tube in tubes:
            record(z, tube)

    stack = _render_stack(labels, spec, builder.rng)
    truth = PhantomTruth(labels, paths, parent, branch_slice)
    return stack, truth


def _render_stack(labels, spec, rng):
    volume = np.empty(labels.shape, dtype=np.uint8)
    for z, lab in enumerate(labels):
        interior = lab > 0
        img = np.full(lab.shape, BACKGROUND_LEVEL)
        if spec.wall_thickness > 0 and interior.any():
            dist = ndi.distance_transform_edt(~interior)
            img[dist <= spec.wall_thickness] = WALL_LEVEL
        img[interior] = INTERIOR_LEVEL
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, lab.shape)
        volume[z] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SliceStack(volume, axis_label="synthetic")


def write_phantom(stack, truth, out_dir, spec=None, specimen_id="phantom"):
    """Write slices, truth masks, 16-bit label rasters, tube paths and a manifest.

    Returns the path of the written ``manifest.json``.
    """
    out = ensure_dir(out_dir)
    for sub in ("slices", "masks", "labels"):
        ensure_dir(out / sub)
    slice_files, annotations = [], {}
    for z in range(len(stack)):
        name = f"slice_{z:04d}.png"
        write_grayscale(stack.slices[z], out / "slices" / name)
        save_mask(truth.instance_labels[z] > 0, out / "masks" / f"mask_{z:04d}.png")
        write_grayscale(truth.instance_labels[z].astype(np.uint16),
                        out / "labels" / f"label_{z:04d}.png")
        slice_files.append(f"slices/{name}")
        annotations[z] = f"masks/mask_{z:04d}.png"
    with open(out / "tube_paths.json", "w") as fh:
        json.dump(truth.to_json(), fh, indent=1)
        fh.write("\n")
    if spec is not None:
        with open(out / "spec.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2)
            fh.write("\n")
    manifest = Manifest(specimen_id, stack.axis_label, slice_files, annotations,
                        {z: "full" for z in annotations}, stack.slice_spacing,
                        stack.pixel_pitch, out)
    path = out / "manifest.json"
    save_manifest(manifest, path)
    return path


def load_phantom_truth(directory):
    from .volume_io import read_grayscale

    directory = Path(directory)
    files = sorted((directory / "labels").glob("label_*.png"))
    labels = np.stack([read_grayscale(f) for f in files]).astype(np.uint16)
    with open(directory / "tube_paths.json") as fh:
        data = json.load(fh)
    paths = {int(t): [(e["slice"], tuple(e["centroid"]), e["radius"]) for e in path]
             for t, path in data["tube_paths"].items()}
    parent = {int(t): p for t, p in data["parent"].items()}
    branch_slice = {int(t): s for t, s in data.get("branch_slice", {}).items()}
    return PhantomTruth(labels, paths, parent, branch_slice)
