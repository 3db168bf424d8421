"""Topology-aware error maps, segmentation losses and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from ._validation import as_bool_mask, as_probability, check_same_shape, check_scalar
from .regions import LabeledMask, label_components, match_regions
from .tiler import plan_grid

BCE_EPS = 1e-7
DEFAULT_TOPO_WEIGHT = 0.1
# Upper bound of the topological loss: every pixel at penalty 1.
TOPO_LOSS_MAX = (1.0 / (1.0 + math.exp(-1.0)) - 0.5) / 2.0


def component_penalty(area_p, area_l):
    """Area-mismatch penalty of a predicted region against its matched truth region.

    ``area_l == 0`` means no truth region exists; the result is then 1.
    """
    if area_p < 1:
        raise ValueError(f"predicted area must be >= 1, got {area_p}")
    if area_l < 0:
        raise ValueError(f"truth area must be >= 0, got {area_l}")
    return min(abs(1.0 - math.exp((area_p - area_l) / area_p)), 1.0)


@dataclass(frozen=True)
class ErrorMap:
    values: np.ndarray
    source: tuple = ("pred", "truth")
    match_distances: dict = field(default_factory=dict, compare=False)


def _as_labeled(x, connectivity=8):
    return x if isinstance(x, LabeledMask) else label_components(x, connectivity)


def error_map(pred, truth, connectivity=8, source=("pred", "truth")):
    """Per-pixel penalty field for a prediction against ground truth.

    Each predicted region's pixels outside its matched truth region carry the
    region's component penalty; everything else is 0.
    """
    pred = _as_labeled(pred, connectivity)
    truth = _as_labeled(truth, connectivity)
    check_same_shape(pred.labels, truth.labels)
    values = np.zeros(pred.shape, dtype=np.float64)
    if pred.region_count == 0:
        return ErrorMap(values, tuple(source))

    matches, distances = match_regions(pred, truth, return_distance=True)
    pred_area = np.bincount(pred.labels.ravel(), minlength=pred.region_count + 1)
    truth_area = np.bincount(truth.labels.ravel(), minlength=truth.region_count + 1)
    penalty = np.zeros(pred.region_count + 1)
    matched = np.zeros(pred.region_count + 1, dtype=np.int64)
    for p, l in matches.items():
        a_l = 0 if l is None else int(truth_area[l])
        penalty[p] = component_penalty(int(pred_area[p]), a_l)
        matched[p] = 0 if l is None else l

    target = matched[pred.labels]
    outside = (pred.labels > 0) & ((target == 0) | (truth.labels != target))
    values[outside] = penalty[pred.labels[outside]]
    return ErrorMap(values, tuple(source), distances)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def topo_loss(em):
    """Mean sigmoid evidence of an error map, shifted so a zero map scores 0.

    Computed as ``sum(sigmoid(E) - 0.5) / (2N)`` with compensated summation.
    """
    values = np.asarray(getattr(em, "values", em), dtype=np.float64)
    n = values.size
    if n == 0:
        return 0.0
    nz = values[values != 0]
    return math.fsum(_sigmoid(nz) - 0.5) / (2.0 * n)


def topo_score(em):
    return 1.0 - topo_loss(em)


def dice(pred, truth):
    p = as_bool_mask(pred, "pred")
    t = as_bool_mask(truth, "truth")
    check_same_shape(p, t)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def bce(pred_prob, truth, eps=BCE_EPS):
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    p = np.clip(as_probability(pred_prob), eps, 1.0 - eps)
    t = as_bool_mask(truth, "truth")
    check_same_shape(p, t)
    terms = np.where(t, -np.log(p), -np.log1p(-p))
    return math.fsum(terms.ravel()) / terms.size


def combined_loss(pred_prob, truth, T=DEFAULT_TOPO_WEIGHT, connectivity=8):
    """Half the sum of BCE and Dice loss, plus ``T`` times the topological loss.

    ``T = 0`` gives the plain BCE/Dice objective. Dice and topological terms
    use the prediction binarised at 0.5.

    Returns
    -------
    total : float
    parts : dict
        ``bce``, ``dice`` (the loss, 1 - Dice) and ``topo``.
    """
    check_scalar(T, "T", min_val=0)
    prob = as_probability(pred_prob)
    t = as_bool_mask(truth, "truth")
    binary = prob >= 0.5
    l_bce = bce(prob, t)
    l_dice = 1.0 - dice(binary, t)
    l_topo = topo_loss(error_map(binary, t, connectivity))
    total = 0.5 * (l_bce + l_dice) + T * l_topo
    return total, {"bce": l_bce, "dice": l_dice, "topo": l_topo}


def count_error(pred, truth, connectivity=8):
    """Relative error of the predicted region count."""
    pred = _as_labeled(pred, connectivity)
    truth = _as_labeled(truth, connectivity)
    if truth.region_count < 1:
        raise ValueError("count error is undefined for a truth mask without regions")
    return abs(pred.region_count - truth.region_count) / truth.region_count


def tile_mean_dice(pred, truth, tile_size=224, step_k=224):
    p = as_bool_mask(pred, "pred")
    t = as_bool_mask(truth, "truth")
    check_same_shape(p, t)
    h, w = p.shape
    size = min(tile_size, h, w)
    grid = plan_grid(h, w, size, min(step_k, size))
    scores = [dice(p[win], t[win]) for _, win in grid.windows()]
    return math.fsum(scores) / len(scores)


def render_error_map(em, path):
    """Write the error map as 8-bit grayscale, 255 for penalty 1."""
    values = np.asarray(getattr(em, "values", em), dtype=np.float64)
    pixels = np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


@dataclass
class EvalReport:
    mdsc_tiles: float
    dsc_full: float
    topo_score: float
    loss_bce: float
    loss_dice: float
    loss_topo: float
    loss_total: float
    count_error: float | None
    region_count_pred: int = 0
    region_count_truth: int = 0
    match_distances: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["match_distances"] = {str(k): v for k, v in sorted(self.match_distances.items())}
        return d


def evaluate(pred_prob, truth, tile_size=224, step_k=224, T=DEFAULT_TOPO_WEIGHT,
             connectivity=8):
    """Score one slice prediction (probabilities or a binary mask) against truth.

    Returns the :class:`EvalReport` and the full-slice :class:`ErrorMap`.
    ``count_error`` is ``None`` when the truth mask has no regions.
    """
    prob = as_probability(pred_prob)
    t = as_bool_mask(truth, "truth")
    check_same_shape(prob, t)
    binary = prob >= 0.5
    pred_lab = label_components(binary, connectivity)
    truth_lab = label_components(t, connectivity)
    em = error_map(pred_lab, truth_lab)
    l_bce = bce(prob, t)
    l_dice = 1.0 - dice(binary, t)
    l_topo = topo_loss(em)
    report = EvalReport(
        mdsc_tiles=tile_mean_dice(binary, t, tile_size, step_k),
        dsc_full=1.0 - l_dice,
        topo_score=1.0 - l_topo,
        loss_bce=l_bce,
        loss_dice=l_dice,
        loss_topo=l_topo,
        loss_total=0.5 * (l_bce + l_dice) + T * l_topo,
        count_error=count_error(pred_lab, truth_lab) if truth_lab.region_count else None,
        region_count_pred=pred_lab.region_count,
        region_count_truth=truth_lab.region_count,
        match_distances=em.match_distances,
    )
    return report, em
