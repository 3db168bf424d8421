"""Command-line interface: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .evaluation import DEFAULT_TOPO_WEIGHT, evaluate, render_error_map
from .phantom import PhantomSpec, generate, write_phantom
from .pipeline import (
    PipelineConfig,
    PipelineError,
    parse_id_range,
    run_pipeline,
    stitch_stage,
    tile_stage,
)
from .regions import label_components, region_props
from .segmentation import SegParams, ingest_probability_map, segment_slice
from .tracer import TraceParams, trace_all, tracks_to_json, tracks_from_json
from .mesher import export_obj, mesh_tracks
from .volume_io import (
    ensure_dir,
    load_manifest,
    load_mask,
    load_mask_dir,
    load_stack,
    save_mask,
)

log = logging.getLogger("corallite")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--manifest", type=Path, help="dataset manifest JSON")
    p.add_argument("--threads", type=int, default=1, help="worker thread cap")
    p.add_argument("--config", type=Path, help="pipeline configuration JSON")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def _require_manifest(args):
    if args.manifest is None:
        raise SystemExit(f"{args.command}: --manifest is required")
    return load_manifest(args.manifest)


def cmd_phantom(args):
    spec = PhantomSpec()
    if args.spec is not None:
        with open(args.spec) as fh:
            spec = PhantomSpec.from_dict(json.load(fh))
    if args.seed is not None:
        spec = PhantomSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    stack, truth = generate(spec)
    path = write_phantom(stack, truth, args.out, spec)
    print(path)


def cmd_tile(args):
    manifest = _require_manifest(args)
    stack = load_stack(manifest, args.threads)
    index = tile_stage(manifest, stack, args.out, args.tile_size, args.step, args.depth,
                       not args.no_snippets)
    print(f"{len(index['snippets'])} snippets -> {Path(args.out) / 'index.json'}")


def cmd_segment(args):
    manifest = _require_manifest(args)
    params = SegParams.from_json(args.params) if args.params else SegParams()
    stack = load_stack(manifest, args.threads)
    out = ensure_dir(args.out)
    for z, image in zip(stack.indices, stack.slices):
        save_mask(segment_slice(image, params, z), out / f"mask_{z:04d}.png")
    print(f"{len(stack)} masks -> {out}")


def cmd_stitch(args):
    with open(args.index) as fh:
        index = json.load(fh)
    counts = stitch_stage(index, Path(args.index).parent, args.out, args.min_area)
    print(f"{len(counts)} slices -> {Path(args.out) / 'masks'}")


def cmd_regions(args):
    mask = load_mask(args.mask)
    props = region_props(label_components(mask, args.connectivity))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "area", "centroid_r", "centroid_c", "major", "minor",
                         "orientation"])
        for p in props:
            writer.writerow([p.label, p.area, repr(p.centroid[0]), repr(p.centroid[1]),
                             repr(p.major_axis_len), repr(p.minor_axis_len),
                             repr(p.orientation)])
    print(f"{len(props)} regions -> {args.out}")


def cmd_evaluate(args):
    prob = ingest_probability_map(args.pred)
    truth = load_mask(args.truth)
    report, em = evaluate(prob, truth, args.tile_size, args.step, args.T, args.connectivity)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.error_map:
        render_error_map(em, args.error_map)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "match_distances"},
                     sort_keys=True))


def cmd_trace(args):
    params = TraceParams(args.gamma, args.gamma_units, args.beta, args.min_len,
                         args.connectivity)
    masks = load_mask_dir(args.masks)
    kept, dropped = trace_all(masks, params)
    tracks_to_json(kept, args.out, params, dropped)
    print(f"{len(kept)} tracks ({len(dropped)} dropped) -> {args.out}")


def cmd_reconstruct(args):
    pitch, spacing = args.pitch, args.spacing
    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        pitch = manifest.pixel_pitch if pitch is None else pitch
        spacing = manifest.slice_spacing if spacing is None else spacing
    tracks = tracks_from_json(args.tracks)
    ids = parse_id_range(args.ids) if args.ids else None
    meshes, skipped = mesh_tracks(tracks, args.ring, pitch or 1.0, spacing or 1.0,
                                  not args.no_caps, ids)
    export_obj(meshes, args.out)
    print(f"{len(meshes)} objects ({len(skipped)} single-section tracks skipped) -> {args.out}")


def cmd_run(args):
    if args.config is not None:
        config = PipelineConfig.from_json(args.config)
    elif args.manifest is not None:
        config = PipelineConfig(manifest=args.manifest, workdir=args.workdir or Path("work"))
    else:
        raise SystemExit("run: give --config or --manifest")
    if args.workdir is not None:
        config.workdir = args.workdir
    if args.manifest is not None:
        config.manifest = args.manifest
    config.threads = max(config.threads, args.threads)
    summary = run_pipeline(config)
    for st in summary["stages"]:
        print(f"{st['stage']:<12} {st['status']}")


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="corallite", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic colony")
    p.add_argument("--spec", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("tile", parents=[common], help="write snippets and a tile index")
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--step", type=int, default=224)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--no-snippets", action="store_true", help="write the index only")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("segment", parents=[common], help="baseline segmentation per slice")
    p.add_argument("--params", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("stitch", parents=[common], help="stitch tile predictions")
    p.add_argument("--index", type=Path, required=True,
                   help="tile index whose entries carry a 'prediction' path")
    p.add_argument("--min-area", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("regions", parents=[common], help="region table of one mask")
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("evaluate", parents=[common], help="score a prediction")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--step", type=int, default=224)
    p.add_argument("--T", type=float, default=DEFAULT_TOPO_WEIGHT, help="topological weight")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--report", type=Path)
    p.add_argument("--error-map", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("trace", parents=[common], help="link regions across slices")
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--gamma-units", choices=("normalised", "normalized", "pixels"),
                   default="normalised")
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("reconstruct", parents=[common], help="mesh tracks into an OBJ")
    p.add_argument("--tracks", type=Path, required=True)
    p.add_argument("--ring", type=int, default=16)
    p.add_argument("--pitch", type=float)
    p.add_argument("--spacing", type=float)
    p.add_argument("--ids", help="id range 'a..b' or list '1,2,3'")
    p.add_argument("--no-caps", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("run", parents=[common], help="run the full pipeline")
    p.add_argument("--workdir", type=Path)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
