"""Acceptance suite: one test per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; ``conftest.py``
prints a PASS/FAIL line per criterion at the end of the run. Run it alone
with ``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
import trimesh

from conftest import ACCEPTANCE_SPEC
from corallite.cli import main
from corallite.evaluation import (
    bce,
    component_penalty,
    count_error,
    dice,
    error_map,
    topo_loss,
    topo_score,
)
from corallite.mesher import EllipseSection, export_obj, loft_track, mesh_tracks
from corallite.phantom import PhantomSpec, generate, write_phantom
from corallite.regions import label_components
from corallite.segmentation import segment_slice
from corallite.tiler import extract_tiles, plan_grid, stitch
from corallite.tracer import TraceParams, trace_stack, track_purity
from oracles import flood_fill_labels, parse_obj, same_partition

TOL = 1e-9
# mpmath references, 30 significant digits, rounded to double
PENALTY_6_4 = 0.395612425086089528
PENALTY_4_6 = 0.393469340287366576
FIVE_PIXEL_LOSS = 0.005776464465750122
ALL_ONES_LOSS = 0.115529289315002440
ALL_ONES_SCORE = 0.884470710684997560
LN2 = 0.693147180559945309

BRANCH_SPEC = dict(extent=(48, 192, 192), n_tubes=8, radius_range=(6.0, 10.0),
                   branch_prob=0.05, wall_thickness=1)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.mark.criterion(1, "component penalty suite")
def test_criterion_1_penalty():
    with Timer() as t:
        assert component_penalty(7, 7) == 0.0
        assert abs(component_penalty(6, 4) - PENALTY_6_4) <= TOL
        assert component_penalty(5, 0) == 1.0
        assert component_penalty(123, 0) == 1.0
        assert abs(component_penalty(4, 6) - PENALTY_4_6) <= TOL
    assert t.elapsed < 1.0


@pytest.mark.criterion(2, "topological loss suite")
def test_criterion_2_topo_loss():
    rng = np.random.default_rng(2)
    with Timer() as t:
        assert topo_loss(np.zeros((10, 10))) == 0.0
        five = np.zeros((10, 10))
        five.flat[[3, 27, 45, 61, 99]] = 1.0
        assert abs(topo_loss(five) - FIVE_PIXEL_LOSS) <= TOL
        assert abs(topo_loss(np.ones((10, 10))) - ALL_ONES_LOSS) <= TOL
        for _ in range(1000):
            shape = tuple(rng.integers(4, 25, size=2))
            pred = rng.random(shape) < rng.uniform(0.05, 0.6)
            truth = rng.random(shape) < rng.uniform(0.05, 0.6)
            s = topo_score(error_map(pred, truth))
            assert ALL_ONES_SCORE - TOL <= s <= 1.0
    assert t.elapsed < 5.0


@pytest.mark.criterion(3, "connected components match flood fill")
def test_criterion_3_components():
    rng = np.random.default_rng(3)
    with Timer() as t:
        for _ in range(500):
            shape = tuple(rng.integers(1, 21, size=2))
            mask = rng.random(shape) < rng.uniform(0.1, 0.8)
            for conn in (4, 8):
                lab = label_components(mask, conn)
                ref, n = flood_fill_labels(mask, conn)
                assert lab.region_count == n
                assert same_partition(lab.labels, ref)
    assert t.elapsed < 10.0


@pytest.mark.criterion(4, "tiling round trip")
def test_criterion_4_tiling():
    rng = np.random.default_rng(4)
    with Timer() as t:
        for _ in range(50):
            k = int(rng.integers(1, 225))
            tile = int(rng.integers(k, 225))
            # a few lattice steps plus a remainder, so clamped last windows occur
            h = tile + k * int(rng.integers(0, 6)) + int(rng.integers(0, k))
            w = tile + k * int(rng.integers(0, 6)) + int(rng.integers(0, k))
            grid = plan_grid(h, w, tile, k)
            assert grid.coverage().min() >= 1
            src = rng.random((h, w)) < 0.5
            tiles = list(zip(grid.origins, extract_tiles(src, grid)))
            assert np.array_equal(stitch(tiles, h, w).raster, src)
    assert t.elapsed < 30.0


@pytest.mark.criterion(5, "dice and BCE identities")
def test_criterion_5_dice_bce():
    m = np.zeros((8, 8), bool)
    m[1:3, 1:3] = True
    disjoint = np.zeros((8, 8), bool)
    disjoint[5:7, 5:7] = True
    half = np.zeros((8, 8), bool)
    half[1:3, 2:4] = True
    assert dice(m, m) == 1.0
    assert dice(m, disjoint) == 0.0
    assert dice(m, half) == 0.5
    assert abs(bce(np.full((8, 8), 0.5), m) - LN2) <= TOL


@pytest.mark.criterion(6, "tracing oracle on the 12-tube phantom")
def test_criterion_6_tracing():
    params = TraceParams(gamma=0.3, gamma_units="normalised", beta=0.3)
    with Timer() as t:
        stack, truth = generate(ACCEPTANCE_SPEC)
        from_truth = trace_stack(list(truth.masks()), params)
        assert len(from_truth) == 12
        assert track_purity(from_truth, truth) == 1.0
        masks = [segment_slice(img, slice_index=z).raster for z, img in enumerate(stack.slices)]
        from_baseline = trace_stack(masks, params)
        assert abs(len(from_baseline) - 12) <= 2
        assert track_purity(from_baseline, truth) >= 0.90
    assert t.elapsed < 60.0


def _first_owner(track, labels):
    z, p = track.sections[0]
    ids = labels[z][p.coords[:, 0], p.coords[:, 1]]
    ids = ids[ids > 0]
    return int(np.bincount(ids).argmax()) if ids.size else None


@pytest.mark.criterion(7, "branch events start new tracks")
def test_criterion_7_branching():
    n_events = 0
    for seed in range(5):
        _, truth = generate(PhantomSpec(seed=seed, **BRANCH_SPEC))
        events = truth.branch_events()
        assert events, f"seed {seed} produced no branch event"
        tracks = trace_stack(list(truth.masks()), TraceParams(gamma=0.3, beta=0.3))
        claimed = set()
        for child, parent, z in events:
            candidates = [tr.track_id for tr in tracks
                          if tr.first_slice > 0 and abs(tr.first_slice - z) <= 1
                          and tr.track_id not in claimed
                          and _first_owner(tr, truth.instance_labels) in (child, parent)]
            assert candidates, f"seed {seed}: no new track for branch of {parent} at {z}"
            claimed.add(candidates[0])
            n_events += 1
    assert n_events >= 5


@pytest.mark.criterion(8, "mesh validity and colony OBJ")
def test_criterion_8_mesh(tmp_path):
    _, truth = generate(ACCEPTANCE_SPEC)
    tracks = trace_stack(list(truth.masks()))
    for caps in (False, True):
        meshes, skipped = mesh_tracks(tracks, 16, caps=caps)
        assert len(meshes) == 12 and not skipped
        for _, mesh in meshes:
            counts = mesh.edge_counts()
            if caps:
                assert set(counts.values()) == {2}
            else:
                n_rings = len(mesh.vertices) // 16
                end_rings = set(range(16)) | set(range((n_rings - 1) * 16, n_rings * 16))
                interior = [c for (a, b), c in counts.items()
                            if not (a in end_rings and b in end_rings)]
                assert interior and all(c == 2 for c in interior)

    r, h = 5.0, 10.0
    rings = [EllipseSection((0.0, 0.0, float(z)), r, r, 0.0) for z in np.linspace(0, h, 5)]
    area = loft_track(rings, 64, caps=False).triangle_areas().sum()
    assert abs(area - 2 * math.pi * r * h) / (2 * math.pi * r * h) < 0.02

    meshes, _ = mesh_tracks(tracks, 16)
    export_obj(meshes, tmp_path / "colony.obj")
    scene = trimesh.load(tmp_path / "colony.obj", force="scene", split_objects=True,
                         group_material=False, process=False)
    assert len(scene.geometry) == 12
    _, _, groups = parse_obj(tmp_path / "colony.obj")
    assert len(groups) == 12
    owned = [set(f) for f in groups.values()]
    assert sum(len(f) for f in owned) == len(set().union(*owned))


@pytest.mark.criterion(9, "count error on constructed pairs")
def test_criterion_9_count_error():
    def dots(n):
        mask = np.zeros((16, 16), bool)
        for i in range(n):
            mask[2 * (i // 6) * 2 % 16, (i % 6) * 2 + 1] = True
        lab = label_components(mask)
        assert lab.region_count == n
        return lab

    assert count_error(dots(10), dots(10)) == 0.0
    assert count_error(dots(12), dots(10)) == 0.2
    assert count_error(dots(0), dots(5)) == 1.0


@pytest.mark.criterion(10, "deterministic full run under 60 s")
def test_criterion_10_determinism(tmp_path):
    stack, truth = generate(ACCEPTANCE_SPEC)
    manifest = write_phantom(stack, truth, tmp_path / "phantom", ACCEPTANCE_SPEC)
    work = tmp_path / "work"
    artifacts = ("evaluation/report.json", "mesh/colony.obj", "trace/tracks.json")
    outputs = []
    for _ in range(2):
        with Timer() as t:
            assert main(["run", "--manifest", str(manifest), "--workdir", str(work)]) == 0
        assert t.elapsed < 60.0, f"pipeline took {t.elapsed:.1f} s"
        outputs.append([(work / a).read_bytes() for a in artifacts])
    assert outputs[0] == outputs[1]
    _, _, groups = parse_obj(work / "mesh" / "colony.obj")
    assert len(groups) == 12
