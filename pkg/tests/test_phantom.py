import math

import numpy as np
import pytest

from corallite.phantom import (
    PhantomSpec,
    generate,
    load_phantom_truth,
    rasterize_ellipse,
    write_phantom,
)
from corallite.regions import label_components
from corallite.volume_io import load_manifest, load_stack
from oracles import flood_fill_labels


def test_straight_tube_has_constant_centroid():
    spec = PhantomSpec(seed=1, extent=(16, 64, 64), n_tubes=1, curvature=0, branch_prob=0)
    stack, truth = generate(spec)
    assert len(stack) == 16
    (path,) = truth.tube_paths.values()
    assert [s for s, _, _ in path] == list(range(16))
    cents = {c for _, c, _ in path}
    assert len(cents) == 1


def test_acceptance_phantom_counts(phantom7):
    stack, truth = phantom7
    assert truth.tube_ids == list(range(1, 13))
    assert stack.slices.shape == (64, 256, 256)
    for z in range(64):
        assert label_components(truth.instance_labels[z] > 0).region_count == 12
        assert len(truth.sections_in_slice(z)) == 12
        assert set(np.unique(truth.instance_labels[z])) == set(range(13))


def test_one_connected_region_per_tube_id(phantom7):
    _, truth = phantom7
    for z in (0, 31, 63):
        lab = truth.instance_labels[z]
        for t in truth.tube_ids:
            _, n = flood_fill_labels(lab == t, 8)
            assert n == 1


def test_generation_is_deterministic():
    spec = PhantomSpec(seed=11, extent=(12, 96, 96), n_tubes=4, branch_prob=0.05)
    s1, t1 = generate(spec)
    s2, t2 = generate(spec)
    np.testing.assert_array_equal(s1.slices, s2.slices)
    np.testing.assert_array_equal(t1.instance_labels, t2.instance_labels)
    assert t1.tube_paths == t2.tube_paths
    assert t1.parent == t2.parent


@pytest.mark.parametrize("curvature", [0.5, 1.0, 2.0])
def test_drift_bounded_by_curvature(curvature):
    spec = PhantomSpec(seed=5, extent=(24, 128, 128), n_tubes=5, curvature=curvature)
    _, truth = generate(spec)
    for path in truth.tube_paths.values():
        for (_, a, _), (_, b, _) in zip(path, path[1:]):
            assert math.dist(a, b) <= curvature + 1e-9


def test_intensity_model():
    spec = PhantomSpec(seed=2, extent=(2, 96, 96), n_tubes=3, noise_sigma=0)
    stack, truth = generate(spec)
    img, lab = stack.slices[0], truth.instance_labels[0]
    assert np.all(img[lab > 0] == 40)
    assert set(np.unique(img[lab == 0])) == {120, 200}


def test_extent_too_small():
    with pytest.raises(ValueError, match="too small"):
        generate(PhantomSpec(extent=(4, 16, 16), n_tubes=3, radius_range=(5, 9)))


@pytest.mark.parametrize("kwargs", [
    {"n_tubes": 0},
    {"radius_range": (1.0, 3.0)},
    {"curvature": -1},
    {"branch_prob": 0.1},
])
def test_spec_invariants(kwargs):
    with pytest.raises(ValueError):
        PhantomSpec(**kwargs)


def test_branching_children_overlap_parent():
    spec = PhantomSpec(seed=0, extent=(48, 192, 192), n_tubes=8, radius_range=(6, 10),
                       branch_prob=0.05, wall_thickness=1)
    _, truth = generate(spec)
    events = truth.branch_events()
    assert events
    for child, parent, z in events:
        assert truth.tube_paths[child][0][0] == z
        prev = truth.instance_labels[z - 1] == parent
        cur = truth.instance_labels[z] == child
        iou = (prev & cur).sum() / (prev | cur).sum()
        assert iou >= 0.3


def test_rasterize_ellipse_area():
    coords = rasterize_ellipse((50.0, 50.0), 20.0, 10.0, 0.3, (100, 100))
    assert abs(len(coords) - math.pi * 200) / (math.pi * 200) < 0.02


def test_write_and_reload(tmp_path):
    spec = PhantomSpec(seed=4, extent=(6, 64, 64), n_tubes=2)
    stack, truth = generate(spec)
    manifest = load_manifest(write_phantom(stack, truth, tmp_path, spec))
    assert manifest.full_annotations().keys() == set(range(6))
    np.testing.assert_array_equal(load_stack(manifest).slices, stack.slices)
    back = load_phantom_truth(tmp_path)
    np.testing.assert_array_equal(back.instance_labels, truth.instance_labels)
    assert back.tube_paths == truth.tube_paths
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
