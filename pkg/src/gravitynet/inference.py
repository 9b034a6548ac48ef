"""Turning per-gravity-point predictions into detections.

Each gravity point is moved by its regressed offset, duplicates are suppressed
with a greedy NMS over synthesized square boxes, and a score threshold decides
the final lesion flag. Detections files are plain CSV so downstream evaluation
never needs the model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .anchors import GravityPointSet
from .errors import DataIOError, InvalidInputError, InvalidMaskError


@dataclass(frozen=True)
class InferenceConfig:
    """box_side is the average lesion size; candidates above iou_threshold merge."""

    box_side: float = 7.0
    iou_threshold: float = 0.5
    score_threshold: float = 0.0
    prefilter_top_k: int = 5000

    def __post_init__(self):
        if self.box_side < 1:
            raise InvalidInputError(f"box side must be >= 1, got {self.box_side}")
        if not 0 < self.iou_threshold <= 1:
            raise InvalidInputError(f"iou threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.prefilter_top_k < 1:
            raise InvalidInputError(f"prefilter_top_k must be >= 1, got {self.prefilter_top_k}")


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float
    is_lesion: bool = False


def decode(points: GravityPointSet | np.ndarray, predictions, top_k: int = 5000) -> list[Detection]:
    """Move every gravity point by its offset; keep the top_k by descending score.

    Ties keep the lower gravity-point index first, so the ordering is total.
    """
    pts = points.points if isinstance(points, GravityPointSet) else np.asarray(points)
    scores = np.asarray(predictions.scores, dtype=np.float64)
    offsets = np.asarray(predictions.offsets, dtype=np.float64)
    if len(scores) != len(pts) or offsets.shape != (len(pts), 2):
        raise InvalidInputError(
            f"predictions ({len(scores)} scores, offsets {offsets.shape}) do not align "
            f"with {len(pts)} gravity points"
        )
    order = np.argsort(-scores, kind="stable")[:top_k]
    moved = pts[order].astype(np.float64) + offsets[order]
    return [Detection(float(x), float(y), float(s)) for (x, y), s in zip(moved, scores[order])]


def iou(center_a: tuple[float, float], center_b: tuple[float, float], box_side: float) -> float:
    """IoU of two axis-aligned square boxes of side box_side centered on the inputs."""
    side = float(box_side)
    iw = max(0.0, side - abs(center_a[0] - center_b[0]))
    ih = max(0.0, side - abs(center_a[1] - center_b[1]))
    inter = iw * ih
    return inter / (2.0 * side * side - inter)


def _pairwise_iou(xy: np.ndarray, ref: np.ndarray, side: float) -> np.ndarray:
    iw = np.maximum(0.0, side - np.abs(xy[:, 0] - ref[0]))
    ih = np.maximum(0.0, side - np.abs(xy[:, 1] - ref[1]))
    inter = iw * ih
    return inter / (2.0 * side * side - inter)


def nms(candidates: Sequence[Detection], config: InferenceConfig) -> list[Detection]:
    """Greedy suppression: keep the best remaining candidate, drop everything
    overlapping it above the IoU threshold. Output stays score-sorted."""
    if not candidates:
        return []
    xy = np.array([[d.x, d.y] for d in candidates], dtype=np.float64)
    scores = np.array([d.score for d in candidates], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(candidates), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(candidates[i])
        overlap = _pairwise_iou(xy, xy[i], config.box_side)
        suppressed |= overlap > config.iou_threshold
    return kept


def apply_tissue_mask(candidates: Sequence[Detection], mask: np.ndarray) -> list[Detection]:
    """Drop candidates whose position, rounded to the nearest pixel and clamped
    to the image, lands outside the tissue mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidMaskError(f"tissue mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    kept = []
    for d in candidates:
        # half pixels round away from the origin
        px = min(max(int(np.floor(d.x + 0.5)), 0), w - 1)
        py = min(max(int(np.floor(d.y + 0.5)), 0), h - 1)
        if mask[py, px]:
            kept.append(d)
    return kept


def classify_detections(detections: Sequence[Detection], score_threshold: float) -> list[Detection]:
    """Set is_lesion on every detection scoring strictly above the threshold."""
    return [replace(d, is_lesion=d.score > score_threshold) for d in detections]


def write_detections(path: str, detections_by_image: Mapping[str, Sequence[Detection]]) -> None:
    """One CSV row per detection, images in id order, detections by falling score."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("image_id,x,y,score\n")
        for image_id in sorted(detections_by_image):
            dets = sorted(detections_by_image[image_id], key=lambda d: -d.score)
            for d in dets:
                fh.write(f"{image_id},{d.x:.6f},{d.y:.6f},{d.score:.6f}\n")


def read_detections(path: str) -> dict[str, list[Detection]]:
    """Parse a detections CSV back into per-image lists (descending score)."""
    if not os.path.exists(path):
        raise DataIOError(f"detections file not found: {path}")
    out: dict[str, list[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "image_id,x,y,score":
            raise DataIOError(f"unexpected detections header in {path}: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataIOError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            image_id, x, y, score = parts
            out.setdefault(image_id, []).append(Detection(float(x), float(y), float(score)))
    for dets in out.values():
        dets.sort(key=lambda d: -d.score)
    return out
