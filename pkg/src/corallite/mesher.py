"""Ellipse-section lofting of tracks into tube meshes and Wavefront OBJ export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_scalar

MIN_SEMI_AXIS_PX = 0.5


@dataclass(frozen=True)
class EllipseSection:
    """One corallite cross-section in physical coordinates.

    ``center`` is ``(x, y, z)`` with x from the column, y from the row and z
    from the slice index. ``degenerate`` marks sections whose axes were
    clamped up to half a pixel.
    """

    center: tuple
    semi_major: float
    semi_minor: float
    orientation: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.semi_major >= self.semi_minor > 0:
            raise ValueError(
                f"need semi_major >= semi_minor > 0, got {self.semi_major}, {self.semi_minor}")


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    object_groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_counts(self):
        """Map undirected edge ``(i, j)``, ``i < j``, to its triangle count."""
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}


def section_from_props(props, slice_index, pixel_pitch=1.0, slice_spacing=1.0):
    """Ellipse section for a region at ``slice_index``.

    Axes shorter than half a pixel are clamped to half a pixel and the section
    is flagged as degenerate.
    """
    semi_major = props.major_axis_len / 2.0
    semi_minor = props.minor_axis_len / 2.0
    degenerate = semi_minor < MIN_SEMI_AXIS_PX
    semi_minor = max(semi_minor, MIN_SEMI_AXIS_PX)
    semi_major = max(semi_major, semi_minor)
    row, col = props.centroid
    return EllipseSection(
        center=(col * pixel_pitch, row * pixel_pitch, slice_index * slice_spacing),
        semi_major=semi_major * pixel_pitch,
        semi_minor=semi_minor * pixel_pitch,
        orientation=float(props.orientation),
        degenerate=degenerate,
    )


def sections_from_track(track, pixel_pitch=1.0, slice_spacing=1.0):
    return [section_from_props(p, z, pixel_pitch, slice_spacing) for z, p in track.sections]


def ellipse_ring(section, ring_resolution):
    """``ring_resolution`` boundary points, counter-clockwise in the x-y plane."""
    t = 2.0 * np.pi * np.arange(ring_resolution) / ring_resolution
    a, b, th = section.semi_major, section.semi_minor, section.orientation
    ca, sa = math.cos(th), math.sin(th)
    lx = a * np.cos(t)
    ly = b * np.sin(t)
    x = section.center[0] + lx * ca - ly * sa
    y = section.center[1] + lx * sa + ly * ca
    z = np.full(ring_resolution, float(section.center[2]))
    return np.column_stack([x, y, z])


def loft_track(sections, ring_resolution=16, caps=True):
    """Join consecutive ellipse rings into a closed tube surface.

    Ring point ``i`` connects to ring point ``i`` of the next section. With
    ``caps`` each end ring is closed by a triangle fan around its centre.
    Faces are wound so normals point outward for sections stacked along +z.
    """
    check_scalar(ring_resolution, "ring_resolution", min_val=3, integer=True)
    if len(sections) < 2:
        raise ValueError(f"lofting needs at least 2 sections, got {len(sections)}")
    m = ring_resolution
    n = len(sections)
    rings = [ellipse_ring(s, m) for s in sections]
    vertices = np.concatenate(rings)

    j = np.arange(m)
    jn = (j + 1) % m
    body = []
    for k in range(n - 1):
        a, b = k * m + j, k * m + jn
        c, d = (k + 1) * m + j, (k + 1) * m + jn
        body.append(np.column_stack([a, b, c]))
        body.append(np.column_stack([b, d, c]))
    triangles = np.concatenate(body)

    if caps:
        bottom = len(vertices)
        top = bottom + 1
        vertices = np.vstack([vertices, sections[0].center, sections[-1].center])
        last = (n - 1) * m
        caps_tri = np.concatenate([
            np.column_stack([np.full(m, bottom), jn, j]),
            np.column_stack([np.full(m, top), last + j, last + jn]),
        ])
        triangles = np.concatenate([triangles, caps_tri])
    return Mesh(vertices, triangles)


def merge_meshes(meshes):
    """Concatenate ``(corallite_id, Mesh)`` pairs into one grouped mesh."""
    verts, tris, groups = [], [], {}
    v_off = t_off = 0
    for cid, mesh in meshes:
        verts.append(mesh.vertices)
        tris.append(mesh.triangles + v_off)
        groups[cid] = (t_off, t_off + len(mesh.triangles))
        v_off += len(mesh.vertices)
        t_off += len(mesh.triangles)
    if not verts:
        return Mesh()
    return Mesh(np.concatenate(verts), np.concatenate(tris), groups)


def export_obj(meshes, path, precision=6):
    """Write ``(corallite_id, Mesh)`` pairs as one OBJ with a group per corallite."""
    fmt = f"{{:.{precision}f}}"
    lines = ["# corallite colony", f"# objects {len(meshes)}"]
    offset = 1
    for cid, mesh in meshes:
        name = f"corallite_{cid}"
        lines.append(f"o {name}")
        lines.append(f"g {name}")
        for x, y, z in mesh.vertices:
            lines.append(f"v {fmt.format(x)} {fmt.format(y)} {fmt.format(z)}")
        for a, b, c in mesh.triangles + offset:
            lines.append(f"f {a} {b} {c}")
        offset += len(mesh.vertices)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def mesh_tracks(tracks, ring_resolution=16, pixel_pitch=1.0, slice_spacing=1.0, caps=True,
                ids=None):
    """Loft every track with at least two sections.

    Returns ``(meshes, skipped)`` where ``meshes`` is a list of
    ``(track_id, Mesh)`` and ``skipped`` lists ids of single-section tracks.
    """
    meshes, skipped = [], []
    for track in tracks:
        if ids is not None and track.track_id not in ids:
            continue
        if len(track.sections) < 2:
            skipped.append(track.track_id)
            continue
        sections = sections_from_track(track, pixel_pitch, slice_spacing)
        meshes.append((track.track_id, loft_track(sections, ring_resolution, caps)))
    return meshes, skipped
