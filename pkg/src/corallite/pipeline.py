"""File-based end-to-end pipeline: tile, segment, stitch, evaluate, trace, reconstruct.

Every stage reads the previous stage's files from the working directory and
writes its own sub-directory plus a ``summary.json``. Re-running a stage
replaces its directory, so repeated runs with the same configuration produce
identical files.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import DEFAULT_TOPO_WEIGHT, evaluate, render_error_map
from .mesher import export_obj, mesh_tracks
from .segmentation import (
    SegParams,
    ingest_probability_map,
    remove_small_regions,
    segment_slice,
    slice_threshold,
)
from .tiler import extract_snippet, plan_grid, stitch_probability
from .tracer import TraceParams, trace_all, tracks_from_json, tracks_to_json
from .volume_io import (
    MaskSlice,
    ensure_dir,
    load_manifest,
    load_mask,
    load_mask_dir,
    load_stack,
    read_grayscale,
    save_mask,
    write_grayscale,
)

log = logging.getLogger(__name__)

STAGES = ("tile", "segment", "stitch", "evaluate", "trace", "reconstruct")


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    manifest: Path
    workdir: Path
    tile_size: int = 224
    step_k: int = 224
    depth: int = 5
    segmentation: SegParams = field(default_factory=SegParams)
    predictions_index: Path = None
    trace: TraceParams = field(default_factory=lambda: TraceParams(min_track_len=3))
    ring_resolution: int = 16
    caps: bool = True
    mesh_ids: tuple = None
    topo_weight: float = DEFAULT_TOPO_WEIGHT
    write_snippets: bool = True
    stages: dict = field(default_factory=lambda: dict.fromkeys(STAGES, True))
    threads: int = 1

    def validate(self):
        """Check every parameter before any work starts."""
        if not isinstance(self.tile_size, int) or self.tile_size < 1:
            raise ValueError(f"tile_size must be a positive integer, got {self.tile_size!r}")
        if not isinstance(self.step_k, int) or not 1 <= self.step_k <= self.tile_size:
            raise ValueError(f"step_k must satisfy 1 <= step_k <= tile_size "
                             f"({self.tile_size}), got {self.step_k!r}")
        if self.depth < 1 or self.depth % 2 == 0:
            raise ValueError(f"depth must be a positive odd integer, got {self.depth}")
        if self.ring_resolution < 3:
            raise ValueError("ring_resolution must be >= 3")
        if self.topo_weight < 0:
            raise ValueError("topo_weight must be >= 0")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        if not Path(self.manifest).is_file():
            raise FileNotFoundError(f"manifest not found: {self.manifest}")
        if self.predictions_index is not None and not Path(self.predictions_index).is_file():
            raise FileNotFoundError(f"predictions index not found: {self.predictions_index}")
        return self

    @classmethod
    def from_dict(cls, d, base=Path(".")):
        base = Path(base)

        def path(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        grid = d.get("grid", {})
        mesh = d.get("mesh", {})
        stages = dict.fromkeys(STAGES, True)
        stages.update(d.get("stages", {}))
        ids = mesh.get("ids")
        return cls(
            manifest=path(d["manifest"]),
            workdir=path(d.get("workdir", "work")),
            tile_size=grid.get("tile_size", 224),
            step_k=grid.get("step_k", 224),
            depth=d.get("depth", 5),
            segmentation=SegParams.from_dict(d.get("segmentation", {})),
            predictions_index=path(d.get("predictions_index")),
            trace=TraceParams(**{"min_track_len": 3, **d.get("trace", {})}),
            ring_resolution=mesh.get("ring", 16),
            caps=mesh.get("caps", True),
            mesh_ids=parse_id_range(ids) if isinstance(ids, str) else ids,
            topo_weight=d.get("evaluation", {}).get("T", DEFAULT_TOPO_WEIGHT),
            write_snippets=d.get("write_snippets", True),
            stages=stages,
            threads=d.get("threads", 1),
        )

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), path.parent)


def parse_id_range(text):
    """Parse ``"a..b"`` (inclusive) or ``"1,4,7"`` into a set of ids."""
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return set(range(int(lo), int(hi) + 1))
    return {int(t) for t in text.split(",") if t.strip()}


def _write_json(data, path):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fresh_dir(path):
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    return ensure_dir(path)


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _tile_name(z, origin):
    return f"s{z:04d}_r{origin[0]:04d}_c{origin[1]:04d}.png"


def tile_stage(manifest, stack, out, tile_size, step_k, depth, write_snippets=True):
    """Write snippet strips (``depth`` tiles stacked vertically) and an index."""
    out = _fresh_dir(out)
    h, w = stack.shape
    grid = plan_grid(h, w, tile_size, step_k)
    annotations = manifest.full_annotations()
    if write_snippets:
        ensure_dir(out / "snippets")
    if annotations:
        ensure_dir(out / "annotations")
    entries = []
    for z in stack.indices:
        ann = load_mask(annotations[z], z).raster if z in annotations else None
        for origin in grid.origins:
            snip = extract_snippet(stack, origin, z, depth, tile_size, ann)
            entry = {"center_slice": z, "origin": list(origin),
                     "source_slices": list(snip.source_indices), "file": None,
                     "annotation": None}
            name = _tile_name(z, origin)
            if write_snippets:
                write_grayscale(snip.voxels.reshape(-1, tile_size), out / "snippets" / name)
                entry["file"] = f"snippets/{name}"
            if snip.center_annotation is not None:
                save_mask(snip.center_annotation, out / "annotations" / name)
                entry["annotation"] = f"annotations/{name}"
            entries.append(entry)
    index = {"height": h, "width": w, "tile_size": tile_size, "step_k": step_k,
             "depth": depth, "n_windows": len(grid), "snippets": entries}
    _write_json(index, out / "index.json")
    return index


def _center_tile(entry, index, root, stack):
    t = index["tile_size"]
    if entry.get("file"):
        strip = read_grayscale(root / entry["file"])
        d = index["depth"] // 2
        return strip[d * t:(d + 1) * t]
    r, c = entry["origin"]
    return stack.slices[stack.position(entry["center_slice"]), r:r + t, c:c + t]


def segment_stage(index, tiles_dir, stack, out, params, threads=1):
    """Run the baseline segmenter on each snippet's centre tile.

    An Otsu threshold is computed once per whole slice and shared by its
    tiles, so background-only tiles are not split at their noise median.
    """
    out = _fresh_dir(out)
    ensure_dir(out / "tiles")
    tile_params = replace(params, min_area=0)
    thresholds = {}
    for z in sorted({e["center_slice"] for e in index["snippets"]}):
        thresholds[z] = slice_threshold(stack.slices[stack.position(z)], params)

    def run(entry):
        tile = _center_tile(entry, index, tiles_dir, stack)
        cut = thresholds[entry["center_slice"]]
        if cut is None:
            mask = np.zeros(tile.shape, dtype=bool)
        else:
            mask = segment_slice(tile, replace(tile_params, threshold=cut)).raster
        name = _tile_name(entry["center_slice"], entry["origin"])
        save_mask(mask, out / "tiles" / name)
        return {**entry, "prediction": f"tiles/{name}"}

    entries = _map(run, index["snippets"], threads)
    pred_index = {**index, "snippets": entries, "source": "baseline",
                  "segmentation": params.to_dict()}
    _write_json(pred_index, out / "index.json")
    return pred_index


def stitch_stage(pred_index, pred_root, out, min_area=0):
    """Average tile predictions per slice; write probability maps and masks."""
    out = _fresh_dir(out)
    ensure_dir(out / "masks")
    ensure_dir(out / "prob")
    h, w = pred_index["height"], pred_index["width"]
    by_slice = {}
    for entry in pred_index["snippets"]:
        by_slice.setdefault(entry["center_slice"], []).append(entry)
    counts = {}
    for z in sorted(by_slice):
        tiles = [(tuple(e["origin"]), ingest_probability_map(pred_root / e["prediction"]))
                 for e in by_slice[z]]
        prob = stitch_probability(tiles, h, w)
        mask = remove_small_regions(prob >= 0.5, min_area)
        prob = np.where(mask | (prob < 0.5), prob, 0.0)
        write_grayscale(np.floor(prob * 65535 + 0.5).astype(np.uint16),
                        out / "prob" / f"prob_{z:04d}.png")
        save_mask(MaskSlice(mask, z), out / "masks" / f"mask_{z:04d}.png")
        counts[z] = int(mask.sum())
    return counts


def evaluate_stage(manifest, stitch_dir, out, tile_size, step_k, T):
    """Score stitched predictions on every fully annotated slice."""
    annotations = manifest.full_annotations()
    if not annotations:
        return None
    out = _fresh_dir(out)
    ensure_dir(out / "error_maps")
    per_slice = {}
    for z, path in annotations.items():
        prob_path = Path(stitch_dir) / "prob" / f"prob_{z:04d}.png"
        if not prob_path.is_file():
            continue
        truth = load_mask(path, z)
        report, em = evaluate(ingest_probability_map(prob_path), truth, tile_size, step_k, T)
        render_error_map(em, out / "error_maps" / f"em_{z:04d}.png")
        per_slice[str(z)] = report.to_dict()
    keys = ("mdsc_tiles", "dsc_full", "topo_score", "loss_bce", "loss_dice", "loss_topo",
            "loss_total", "count_error")
    mean = {}
    for k in keys:
        vals = [r[k] for r in per_slice.values() if r[k] is not None]
        mean[k] = math.fsum(vals) / len(vals) if vals else None
    report = {"n_slices": len(per_slice), "mean": mean, "per_slice": per_slice,
              "topo_weight": T, "tile_size": tile_size, "step_k": step_k}
    _write_json(report, out / "report.json")
    return report


def trace_stage(masks_dir, out, params):
    out = _fresh_dir(out)
    masks = load_mask_dir(masks_dir)
    kept, dropped = trace_all(masks, params)
    tracks_to_json(kept, out / "tracks.json", params, dropped)
    return kept, dropped


def reconstruct_stage(tracks_path, out, pixel_pitch, slice_spacing, ring, caps, ids=None):
    out = _fresh_dir(out)
    tracks = tracks_from_json(tracks_path)
    meshes, skipped = mesh_tracks(tracks, ring, pixel_pitch, slice_spacing, caps, ids)
    export_obj(meshes, out / "colony.obj")
    return meshes, skipped


def run_pipeline(config):
    """Run every enabled stage in order; return the pipeline summary dict.

    Raises :class:`PipelineError` naming the failing stage.
    """
    try:
        config.validate()
    except (ValueError, TypeError, FileNotFoundError) as exc:
        raise PipelineError("config", str(exc)) from exc

    work = ensure_dir(config.workdir)
    manifest = load_manifest(config.manifest)
    stack = load_stack(manifest, config.threads)
    enabled = config.stages
    dirs = {s: work / d for s, d in zip(STAGES, ("tiles", "segment", "stitch", "evaluation",
                                                 "trace", "mesh"))}
    summary = {"specimen_id": manifest.specimen_id, "n_slices": len(stack),
               "shape": list(stack.shape), "stages": []}

    def record(stage, status, **info):
        entry = {"stage": stage, "status": status, **info}
        summary["stages"].append(entry)
        if status == "ok" and dirs[stage].is_dir():
            _write_json(entry, dirs[stage] / "summary.json")
        log.info("%s: %s", stage, status)

    def guarded(stage, fn):
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc

    index = None
    if enabled.get("tile", True):
        index = guarded("tile", lambda: tile_stage(
            manifest, stack, dirs["tile"], config.tile_size, config.step_k, config.depth,
            config.write_snippets))
        record("tile", "ok", n_tiles=len(index["snippets"]), n_windows=index["n_windows"])
    else:
        record("tile", "skipped", reason="disabled")

    if config.predictions_index is not None:
        pred_index = _read_json(config.predictions_index)
        pred_root = Path(config.predictions_index).parent
        record("segment", "skipped", reason="external predictions ingested",
               n_tiles=len(pred_index["snippets"]))
    elif enabled.get("segment", True):
        if index is None:
            index = guarded("segment", lambda: _read_json(dirs["tile"] / "index.json"))
        pred_index = guarded("segment", lambda: segment_stage(
            index, dirs["tile"], stack, dirs["segment"], config.segmentation, config.threads))
        pred_root = dirs["segment"]
        record("segment", "ok", n_tiles=len(pred_index["snippets"]))
    else:
        pred_root = dirs["segment"]
        pred_index = None
        record("segment", "skipped", reason="disabled")

    if enabled.get("stitch", True):
        if pred_index is None:
            pred_index = guarded("stitch", lambda: _read_json(pred_root / "index.json"))
        counts = guarded("stitch", lambda: stitch_stage(
            pred_index, pred_root, dirs["stitch"], config.segmentation.min_area))
        record("stitch", "ok", n_slices=len(counts),
               foreground_pixels=int(sum(counts.values())))
    else:
        record("stitch", "skipped", reason="disabled")

    if enabled.get("evaluate", True):
        report = guarded("evaluate", lambda: evaluate_stage(
            manifest, dirs["stitch"], dirs["evaluate"], config.tile_size, config.step_k,
            config.topo_weight))
        if report is None:
            record("evaluate", "skipped", reason="no ground-truth annotations in manifest")
        else:
            record("evaluate", "ok", n_slices=report["n_slices"], mean=report["mean"])
    else:
        record("evaluate", "skipped", reason="disabled")

    if enabled.get("trace", True):
        kept, dropped = guarded("trace", lambda: trace_stage(
            dirs["stitch"] / "masks", dirs["trace"], config.trace))
        record("trace", "ok", n_tracks=len(kept), n_dropped=len(dropped))
    else:
        record("trace", "skipped", reason="disabled")

    if enabled.get("reconstruct", True):
        meshes, skipped = guarded("reconstruct", lambda: reconstruct_stage(
            dirs["trace"] / "tracks.json", dirs["reconstruct"], manifest.pixel_pitch,
            manifest.slice_spacing, config.ring_resolution, config.caps, config.mesh_ids))
        record("reconstruct", "ok", n_objects=len(meshes), skipped_single_section=skipped)
    else:
        record("reconstruct", "skipped", reason="disabled")

    _write_json(summary, work / "pipeline.json")
    return summary
