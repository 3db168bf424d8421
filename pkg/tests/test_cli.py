import csv
import json

import numpy as np
import pytest
from PIL import Image

from corallite.cli import main
from corallite.phantom import PhantomSpec, generate, write_phantom
from corallite.pipeline import PipelineConfig, PipelineError, parse_id_range, run_pipeline
from corallite.volume_io import load_manifest, save_manifest
from oracles import parse_obj

SMALL = PhantomSpec(seed=3, extent=(10, 128, 128), n_tubes=4)


@pytest.fixture(scope="module")
def small_phantom(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    stack, truth = generate(SMALL)
    return write_phantom(stack, truth, out, SMALL), truth


def _config(tmp_path, manifest, **kw):
    cfg = {"manifest": str(manifest), "workdir": str(tmp_path / "work"),
           "grid": {"tile_size": 64, "step_k": 48}, "depth": 3, **kw}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_end_to_end(tmp_path, small_phantom):
    manifest, truth = small_phantom
    assert main(["run", "--config", str(_config(tmp_path, manifest))]) == 0
    work = tmp_path / "work"
    summary = json.loads((work / "pipeline.json").read_text())
    assert [s["status"] for s in summary["stages"]] == ["ok"] * 6
    report = json.loads((work / "evaluation" / "report.json").read_text())
    assert report["mean"]["dsc_full"] > 0.95
    _, _, groups = parse_obj(work / "mesh" / "colony.obj")
    assert len(groups) == 4
    for stage in ("tiles", "segment", "stitch", "evaluation", "trace", "mesh"):
        assert (work / stage / "summary.json").is_file()


def test_run_without_truth_skips_evaluation(tmp_path, small_phantom):
    manifest_path, _ = small_phantom
    m = load_manifest(manifest_path)
    bare = type(m)(m.specimen_id, m.axis_label, [str(m.resolve(f)) for f in m.slice_files])
    save_manifest(bare, tmp_path / "bare.json")
    summary = run_pipeline(PipelineConfig.from_json(_config(tmp_path, tmp_path / "bare.json")))
    stages = {s["stage"]: s for s in summary["stages"]}
    assert stages["evaluate"]["status"] == "skipped"
    assert "ground-truth" in stages["evaluate"]["reason"]
    assert stages["reconstruct"]["status"] == "ok"


def test_step_larger_than_tile_is_config_error(tmp_path, small_phantom, capsys):
    manifest, _ = small_phantom
    cfg = _config(tmp_path, manifest, grid={"tile_size": 64, "step_k": 65})
    with pytest.raises(PipelineError) as exc:
        run_pipeline(PipelineConfig.from_json(cfg))
    assert exc.value.stage == "config"
    assert not (tmp_path / "work").exists()
    assert main(["run", "--config", str(cfg)]) == 1
    assert "step_k" in capsys.readouterr().err


def test_stage_subcommands(tmp_path, small_phantom):
    manifest, _ = small_phantom
    root = manifest.parent
    assert main(["tile", "--manifest", str(manifest), "--tile-size", "64", "--step", "64",
                 "--depth", "3", "--out", str(tmp_path / "tiles")]) == 0
    index = json.loads((tmp_path / "tiles" / "index.json").read_text())
    assert len(index["snippets"]) == 10 * 4

    assert main(["segment", "--manifest", str(manifest), "--out", str(tmp_path / "seg")]) == 0
    assert len(list((tmp_path / "seg").glob("mask_*.png"))) == 10

    assert main(["regions", "--mask", str(root / "masks" / "mask_0000.png"),
                 "--out", str(tmp_path / "r.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 4

    assert main(["evaluate", "--pred", str(root / "masks" / "mask_0000.png"),
                 "--truth", str(root / "masks" / "mask_0000.png"),
                 "--report", str(tmp_path / "rep.json"),
                 "--error-map", str(tmp_path / "em.png")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["dsc_full"] == 1.0 and rep["topo_score"] == 1.0
    assert not np.array(Image.open(tmp_path / "em.png")).any()

    assert main(["trace", "--masks", str(root / "masks"), "--out",
                 str(tmp_path / "tracks.json")]) == 0
    tracks = json.loads((tmp_path / "tracks.json").read_text())["tracks"]
    assert len(tracks) == 4

    assert main(["reconstruct", "--tracks", str(tmp_path / "tracks.json"), "--ring", "8",
                 "--ids", "0..1", "--out", str(tmp_path / "c.obj")]) == 0
    verts, faces, groups = parse_obj(tmp_path / "c.obj")
    assert sorted(groups) == ["corallite_0", "corallite_1"]
    assert len(verts) == 2 * (10 * 8 + 2)


def test_stitch_subcommand_with_external_predictions(tmp_path, small_phantom):
    manifest, _ = small_phantom
    main(["tile", "--manifest", str(manifest), "--tile-size", "64", "--step", "64",
          "--depth", "1", "--out", str(tmp_path / "tiles")])
    index = json.loads((tmp_path / "tiles" / "index.json").read_text())
    for entry in index["snippets"]:
        entry["prediction"] = entry["annotation"]
    (tmp_path / "tiles" / "index.json").write_text(json.dumps(index))
    assert main(["stitch", "--index", str(tmp_path / "tiles" / "index.json"),
                 "--out", str(tmp_path / "st")]) == 0
    stitched = np.array(Image.open(tmp_path / "st" / "masks" / "mask_0000.png"))
    truth = np.array(Image.open(manifest.parent / "masks" / "mask_0000.png"))
    np.testing.assert_array_equal(stitched, truth)


def test_phantom_subcommand(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"extent": [4, 64, 64], "n_tubes": 2}))
    assert main(["phantom", "--spec", str(spec), "--seed", "9", "--out",
                 str(tmp_path / "ph")]) == 0
    assert len(list((tmp_path / "ph" / "labels").glob("*.png"))) == 4
    assert json.loads((tmp_path / "ph" / "spec.json").read_text())["seed"] == 9


def test_missing_manifest_fails_cleanly(tmp_path):
    assert main(["segment", "--manifest", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "o")]) == 1


def test_parse_id_range():
    assert parse_id_range("2..4") == {2, 3, 4}
    assert parse_id_range("1, 7") == {1, 7}
