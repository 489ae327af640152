"""Frame-level detection metrics from predicted masks.

A frame's decision comes from mask centroids: a ground-truth-positive
frame counts as TP when the predicted mask is non-empty, its centroid
lands within ``radius`` pixels (Euclidean, inclusive) of the true
centroid, and no supplied decoy centroid sits as close to the prediction
as the true one does. Negative frames count TN on an empty prediction,
FP otherwise. Reports aggregate the four counts into accuracy,
sensitivity, specificity, and precision; a metric whose denominator is
zero is reported as absent rather than zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Manifest, load_batch, read_sample
from .model import ModelParams, forward
from .preprocess import DepthFrame

DECISION_RADIUS_PX = 5.0
BINARIZE_THRESHOLD = 0.5
OUTCOMES = ("TP", "FP", "TN", "FN")


class EvalError(Exception):
    pass


def binarize(prob_mask, threshold=BINARIZE_THRESHOLD) -> np.ndarray:
    """Probability map (H, W) or (H, W, 1) -> uint8 mask; >= is positive."""
    arr = np.asarray(getattr(prob_mask, "data", prob_mask))
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise EvalError(f"expected (H, W) or (H, W, 1) probabilities, got {arr.shape}")
    return (arr >= threshold).astype(np.uint8)


def centroid(mask) -> tuple:
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EvalError("centroid of an empty mask is undefined")
    return float(rows.mean()), float(cols.mean())


@dataclass(frozen=True)
class Decision:
    frame_id: str
    predicted: bool
    actual: bool
    distance: float | None  # set iff both masks are non-empty
    outcome: str


def decide(pred_mask, gt_mask, radius=DECISION_RADIUS_PX, frame_id="",
           decoys=()) -> Decision:
    """Classify one frame; ``decoys`` are centroids of non-concealing subjects."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    predicted = bool(pred_mask.any())
    actual = bool(gt_mask.any())
    distance = None
    if predicted and actual:
        pr, pc = centroid(pred_mask)
        gr, gc = centroid(gt_mask)
        distance = math.hypot(pr - gr, pc - gc)
    if actual:
        if not predicted or distance > radius:
            outcome = "FN"
        elif any(math.hypot(pr - dr, pc - dc) <= distance for dr, dc in decoys):
            # attribution to the wrong subject is a miss
            outcome = "FN"
        else:
            outcome = "TP"
    else:
        outcome = "TN" if not predicted else "FP"
    return Decision(frame_id=frame_id, predicted=predicted, actual=actual,
                    distance=distance, outcome=outcome)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None

    def to_text(self):
        def pct(v):
            return "n/a" if v is None else f"{v:.2f}%"

        return (f"TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn}\n"
                f"accuracy={pct(self.accuracy)} sensitivity={pct(self.sensitivity)} "
                f"specificity={pct(self.specificity)} precision={pct(self.precision)}\n")


def _ratio(num, den):
    return None if den == 0 else 100.0 * num / den


def report(decisions) -> EvalReport:
    counts = {k: 0 for k in OUTCOMES}
    for d in decisions:
        if d.outcome not in counts:
            raise EvalError(f"unknown outcome {d.outcome!r}")
        counts[d.outcome] += 1
    tp, fp, tn, fn = counts["TP"], counts["FP"], counts["TN"], counts["FN"]
    return EvalReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        precision=_ratio(tp, tp + fp),
    )


def decoy_centroids(depth_values, gt_mask) -> list:
    """Centroids of subject silhouettes that do not carry the ground truth.

    Works on raw (unpreprocessed) frames from the simulator, where each
    subject is a constant-range silhouette: every distinct depth level
    below the background plane, other than hole zeros, is one subject.
    """
    vals = np.asarray(depth_values)
    gt_mask = np.asarray(gt_mask)
    levels = np.unique(vals)
    levels = levels[levels > 0.0]
    if levels.size <= 1:
        return []
    background = levels.max()
    out = []
    for level in levels:
        if level == background:
            continue
        blob = vals == level
        if gt_mask.any() and (blob & (gt_mask > 0)).any():
            continue
        out.append(centroid(blob))
    return out


def evaluate_dataset(model: ModelParams, manifest: Manifest, root,
                     split_name="test", threshold=BINARIZE_THRESHOLD,
                     radius=DECISION_RADIUS_PX, modality="fused",
                     batch_size=64, use_decoys=True):
    """Run the model over a split; returns (EvalReport, [Decision])."""
    ids = manifest.by_split(split_name)
    if not ids:
        raise EvalError(f"split {split_name!r} is empty")
    decisions = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        batch = load_batch(manifest, root, chunk)
        if modality == "radar":
            batch.depth = np.zeros_like(batch.depth)
        elif modality == "depth":
            batch.radar = np.zeros_like(batch.radar)
        elif modality != "fused":
            raise EvalError(f"unknown modality {modality!r}")
        pred = forward(model, batch.radar, batch.depth, mode="infer").data
        for k, frame_id in enumerate(chunk):
            gt = batch.mask[k, :, :, 0]
            decoys = ()
            if use_decoys:
                rec = manifest.record(frame_id)
                raw = read_sample(f"{root}/{rec.path}")
                decoys = decoy_centroids(raw.depth.values, raw.mask)
            decisions.append(decide(binarize(pred[k], threshold), gt,
                                    radius=radius, frame_id=frame_id,
                                    decoys=decoys))
    return report(decisions), decisions


def emit_overlay(depth, pred_mask, gt_mask, path) -> None:
    """Write a P6 PPM: depth as grayscale, prediction red, truth blue,
    agreement green."""
    vals = depth.values if isinstance(depth, DepthFrame) else np.asarray(depth)
    if vals.ndim != 2:
        raise EvalError(f"expected a 2-d depth frame, got shape {vals.shape}")
    pred = np.asarray(pred_mask) > 0
    gt = np.asarray(gt_mask) > 0
    if pred.shape != vals.shape or gt.shape != vals.shape:
        raise EvalError("mask shapes must match the depth frame")
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        gray = np.round(255.0 * (vals - lo) / (hi - lo)).astype(np.uint8)
    else:
        gray = np.full(vals.shape, 128, dtype=np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    rgb[pred & ~gt] = (255, 0, 0)
    rgb[gt & ~pred] = (0, 0, 255)
    rgb[pred & gt] = (0, 255, 0)
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())
