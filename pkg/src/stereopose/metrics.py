"""Pose metrics (ADD, ADD-S), the diameter success rule, keypoint errors and
recall-versus-baseline curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyModel, NoValidPoints
from .fusion import Keypoints3D
from .geometry import Pose, transform

ADDS_CHUNK = 128
RECALL_THRESHOLD = 0.03  # meters


def _model_points(model) -> np.ndarray:
    """Raw point arrays are used as given; an ObjectModel contributes its
    evaluation subset."""
    pts = model.metric_points() if hasattr(model, "metric_points") else model
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("model has no points")
    return pts


def add_metric(model, pred: Pose, gt: Pose) -> float:
    """Mean distance between index-matched model points under both poses."""
    p = _model_points(model)
    return float(np.linalg.norm(transform(gt, p) - transform(pred, p), axis=1).mean())


def adds_metric(model, pred: Pose, gt: Pose) -> float:
    """Mean distance from each predicted point to the closest ground-truth point.

    Exhaustive nearest neighbour, evaluated in row chunks to bound memory.
    """
    p = _model_points(model)
    a, b = transform(pred, p), transform(gt, p)
    total = 0.0
    for lo in range(0, len(a), ADDS_CHUNK):
        diff = a[lo : lo + ADDS_CHUNK, None, :] - b[None, :, :]
        total += np.sqrt((diff**2).sum(-1).min(axis=1)).sum()
    return float(total / len(a))


def success(value: float, diameter: float, fraction: float = 0.1) -> bool:
    """Strict ``value < fraction * diameter``.

    A value within 1e-12 (relative) of the threshold counts as on it, so that
    0.010 against 10% of 0.1 fails despite the product rounding up.
    """
    if not diameter > 0:
        raise ValueError("diameter must be positive")
    limit = fraction * diameter
    return bool(value < limit and not np.isclose(value, limit, rtol=1e-12, atol=0.0))


def keypoint_error(pred, gt) -> tuple[np.ndarray, float]:
    """Per-keypoint distances (NaN where the prediction is invalid) and their
    mean over valid points."""
    pred = pred if isinstance(pred, Keypoints3D) else Keypoints3D.all_valid(pred)
    gt_pts = np.asarray(gt.points if isinstance(gt, Keypoints3D) else gt, dtype=float).reshape(-1, 3)
    if len(gt_pts) != len(pred):
        raise ValueError("keypoint sets differ in length")
    err = np.linalg.norm(pred.points - gt_pts, axis=1)
    if not pred.valid.any():
        raise NoValidPoints("no valid predicted keypoints")
    return err, float(err[pred.valid].mean())


@dataclass(frozen=True)
class PoseEvalResult:
    add: float
    add_s: float
    success: bool
    keypoint_errors: tuple[float, ...]
    baseline: float


def evaluate_pose(model, pred: Pose, gt: Pose, keypoint_errors, baseline: float) -> PoseEvalResult:
    """Bundle the metrics of one estimate; success uses ADD-S for symmetric models."""
    add = add_metric(model, pred, gt)
    adds = adds_metric(model, pred, gt)
    value = adds if getattr(model, "symmetric", False) else add
    return PoseEvalResult(add, adds, success(value, model.diameter), tuple(float(e) for e in keypoint_errors), baseline)


@dataclass(frozen=True)
class RecallBin:
    low: float
    high: float
    recall: float
    count: int


@dataclass(frozen=True)
class RecallCurve:
    bins: tuple[RecallBin, ...]
    threshold: float


def recall_curve(samples, threshold: float = RECALL_THRESHOLD, bin_width: float = 0.02) -> RecallCurve:
    """Fraction of keypoint errors below ``threshold`` per baseline bin.

    ``samples`` holds ``(baseline, keypoint_errors)`` pairs. Bin ``k`` covers
    ``[k w, (k+1) w)``. NaN errors count as misses; empty bins are left out.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    hits: dict[int, int] = {}
    counts: dict[int, int] = {}
    for baseline, errors in samples:
        k = int(np.floor(baseline / bin_width + 1e-9))
        e = np.asarray(errors, dtype=float).reshape(-1)
        hits[k] = hits.get(k, 0) + int(np.sum(e < threshold))
        counts[k] = counts.get(k, 0) + len(e)
    bins = tuple(
        RecallBin(k * bin_width, (k + 1) * bin_width, hits[k] / counts[k], counts[k])
        for k in sorted(counts)
        if counts[k] > 0
    )
    return RecallCurve(bins, threshold)
