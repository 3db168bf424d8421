"""Reconstruct individual corallite tubes from micro-CT slice stacks.

The package covers slice/mask I/O, sliding-window tiling, connected-component
statistics, topology-aware error maps and metrics, a classical baseline
segmenter, synthetic phantom colonies, cross-slice tracing and ellipse-loft
meshing.
"""

__version__ = "0.1.0"

from .evaluation import (
    ErrorMap,
    EvalReport,
    bce,
    combined_loss,
    component_penalty,
    count_error,
    dice,
    error_map,
    evaluate,
    render_error_map,
    topo_loss,
    topo_score,
)
from .mesher import EllipseSection, Mesh, export_obj, loft_track, section_from_props
from .phantom import PhantomSpec, PhantomTruth, generate
from .regions import LabeledMask, RegionProps, label_components, match_regions, region_props
from .segmentation import (
    BaselineSegmenter,
    SegParams,
    ingest_probability_map,
    segment_slice,
    slice_threshold,
)
from .tiler import Snippet, SnippetTiler, TileGrid, extract_snippet, plan_grid, stitch
from .tracer import SliceTracer, TraceParams, Track, match_slice_pair, trace_stack, track_purity
from .volume_io import Manifest, MaskSlice, SliceStack, load_mask, load_stack, save_mask

__all__ = [
    "BaselineSegmenter",
    "EllipseSection",
    "ErrorMap",
    "EvalReport",
    "LabeledMask",
    "Manifest",
    "MaskSlice",
    "Mesh",
    "PhantomSpec",
    "PhantomTruth",
    "RegionProps",
    "SegParams",
    "SliceStack",
    "SliceTracer",
    "Snippet",
    "SnippetTiler",
    "TileGrid",
    "TraceParams",
    "Track",
    "bce",
    "combined_loss",
    "component_penalty",
    "count_error",
    "dice",
    "error_map",
    "evaluate",
    "export_obj",
    "extract_snippet",
    "generate",
    "ingest_probability_map",
    "label_components",
    "load_mask",
    "load_stack",
    "loft_track",
    "match_regions",
    "match_slice_pair",
    "plan_grid",
    "region_props",
    "render_error_map",
    "save_mask",
    "section_from_props",
    "segment_slice",
    "slice_threshold",
    "stitch",
    "topo_loss",
    "topo_score",
    "trace_stack",
    "track_purity",
]
