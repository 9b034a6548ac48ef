"""Gravity-point grids and the hooking rule.

A gravity point is a pixel-based anchor. A base configuration of points is laid
out in a square feature grid of side K (one grid per feature-map cell) and tiled
over the whole image. At training time each gravity point closer than the
hooking distance to its nearest lesion center is labeled positive and receives
that center as its regression target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidGeometryError, InvalidInputError, InvalidStepError, NonSquareGridError

# chunk size for the point-to-lesion distance matrix; bounds peak memory on 10^5-point grids
_HOOK_CHUNK = 16384


def compute_feature_grid_size(image_height: int, image_width: int, fm_height: int, fm_width: int) -> int:
    """Side K of the square feature grid covered by one feature-map cell.

    Both image axes must downsample to the same K; a rectangular cell footprint
    is rejected rather than silently resolved with max().
    """
    if min(image_height, image_width, fm_height, fm_width) <= 0:
        raise InvalidGeometryError(
            f"dimensions must be positive, got image {image_height}x{image_width}, "
            f"feature map {fm_height}x{fm_width}"
        )
    if fm_height > image_height or fm_width > image_width:
        raise InvalidGeometryError(
            f"feature map {fm_height}x{fm_width} larger than image {image_height}x{image_width}"
        )
    k_h = math.ceil(image_height / fm_height)
    k_w = math.ceil(image_width / fm_width)
    if k_h != k_w:
        raise NonSquareGridError(
            f"feature grid is not square: ceil({image_height}/{fm_height})={k_h} "
            f"but ceil({image_width}/{fm_width})={k_w}"
        )
    return k_h


@dataclass(frozen=True)
class GridConfig:
    """Geometry of the gravity-point grid for one image/feature-map pair."""

    image_height: int
    image_width: int
    fm_height: int
    fm_width: int
    step: int
    hooking_distance: float

    def __post_init__(self):
        k = compute_feature_grid_size(self.image_height, self.image_width, self.fm_height, self.fm_width)
        if not 0 < self.step <= k - 2:
            raise InvalidStepError(f"step must satisfy 0 < step <= K-2 = {k - 2}, got {self.step}")
        if self.hooking_distance <= 0:
            raise InvalidGeometryError(f"hooking distance must be positive, got {self.hooking_distance}")

    @property
    def grid_size(self) -> int:
        return compute_feature_grid_size(self.image_height, self.image_width, self.fm_height, self.fm_width)


@dataclass(frozen=True)
class GravityPointSet:
    """All gravity points of one image, in the fixed ordering the model heads emit.

    points[(i * fm_width + j) * per_grid_count + a] is base point a of the
    feature-map cell at row i, column j. Coordinates are integer pixels (x, y).
    """

    points: np.ndarray
    per_grid_count: int
    grid_size: int

    def __len__(self) -> int:
        return len(self.points)


def generate_base_configuration(grid_size: int, step: int) -> np.ndarray:
    """Grid-local (x, y) positions of one feature grid, row-major.

    Axis positions are i*step for i = 0..floor((K-2)/step), so the first point
    sits in the upper-left corner and none exceeds K-2. When K-2 is a multiple
    of step the layout is equispaced.
    """
    if not 0 < step <= grid_size - 2:
        raise InvalidStepError(f"step must satisfy 0 < step <= K-2 = {grid_size - 2}, got {step}")
    axis = np.arange(0, grid_size - 1, step, dtype=np.int64)
    xs, ys = np.meshgrid(axis, axis)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def per_grid_count(grid_size: int, step: int) -> int:
    """Number of gravity points inside one feature grid."""
    return ((grid_size - 2) // step + 1) ** 2


def generate_gravity_points(config: GridConfig) -> GravityPointSet:
    """Tile the base configuration over every feature-map cell.

    Cells are visited row-major and each contributes the base configuration
    translated by (j*K, i*K). Points falling outside the image (possible only
    when K*fm_height > image_height or the width analogue) are dropped.
    """
    k = config.grid_size
    base = generate_base_configuration(k, config.step)
    ox = np.arange(config.fm_width, dtype=np.int64) * k
    oy = np.arange(config.fm_height, dtype=np.int64) * k
    # (fm_h, fm_w, n_base, 2) -> flat, row-major over cells then over the base layout
    pts = base[None, None, :, :] + np.stack(
        [np.broadcast_to(ox[None, :], (config.fm_height, config.fm_width)),
         np.broadcast_to(oy[:, None], (config.fm_height, config.fm_width))],
        axis=2,
    )[:, :, None, :]
    pts = pts.reshape(-1, 2)
    inside = (pts[:, 0] < config.image_width) & (pts[:, 1] < config.image_height)
    if not inside.all():
        pts = pts[inside]
    return GravityPointSet(points=pts, per_grid_count=len(base), grid_size=k)


@dataclass(frozen=True)
class LesionAnnotation:
    """A lesion center plus the extent of its smallest enclosing box."""

    center_x: float
    center_y: float
    bbox_width: float
    bbox_height: float

    def __post_init__(self):
        if self.bbox_width <= 0 or self.bbox_height <= 0:
            raise InvalidInputError(
                f"lesion bbox sides must be positive, got {self.bbox_width}x{self.bbox_height}"
            )

    @property
    def center(self) -> tuple[float, float]:
        return (self.center_x, self.center_y)


@dataclass(frozen=True)
class HookingAssignment:
    """Per-gravity-point training targets produced by the hooking rule.

    labels[i] is True iff point i lies strictly closer than the hooking
    distance to its nearest lesion center; matched_lesion[i] is that lesion's
    index (-1 for negatives) and target_offsets[i] = center - point (zeros for
    negatives).
    """

    labels: np.ndarray
    matched_lesion: np.ndarray
    target_offsets: np.ndarray

    @property
    def positive_count(self) -> int:
        return int(self.labels.sum())


def _lesion_centers(lesions: Sequence[LesionAnnotation]) -> np.ndarray:
    return np.array([[l.center_x, l.center_y] for l in lesions], dtype=np.float64).reshape(-1, 2)


def _nearest_lesion(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest center, lowest index on ties."""
    n = len(points)
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _HOOK_CHUNK):
        hi = min(lo + _HOOK_CHUNK, n)
        diff = points[lo:hi, None, :].astype(np.float64) - centers[None, :, :]
        dist2 = (diff * diff).sum(axis=2)
        idx[lo:hi] = dist2.argmin(axis=1)
        d2[lo:hi] = dist2[np.arange(hi - lo), idx[lo:hi]]
    return idx, d2


def hook_gravity_points(
    points: GravityPointSet | np.ndarray,
    lesions: Sequence[LesionAnnotation],
    hooking_distance: float,
) -> HookingAssignment:
    """Assign every gravity point a class label and, for positives, a regression target."""
    pts = points.points if isinstance(points, GravityPointSet) else np.asarray(points)
    n = len(pts)
    labels = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    offsets = np.zeros((n, 2), dtype=np.float64)
    if len(lesions) == 0:
        return HookingAssignment(labels, matched, offsets)
    centers = _lesion_centers(lesions)
    idx, d2 = _nearest_lesion(pts, centers)
    # strict inequality, compared on squared distances so exact-boundary cases are not
    # perturbed by a sqrt rounding
    labels = d2 < float(hooking_distance) ** 2
    matched[labels] = idx[labels]
    offsets[labels] = centers[idx[labels]] - pts[labels].astype(np.float64)
    return HookingAssignment(labels, matched, offsets)


def hooking_coverage(
    points: GravityPointSet | np.ndarray,
    lesions: Sequence[LesionAnnotation],
    hooking_distance: float,
) -> np.ndarray:
    """Number of gravity points hooked to each lesion; zero means the lesion is unreachable."""
    assignment = hook_gravity_points(points, lesions, hooking_distance)
    counts = np.zeros(len(lesions), dtype=np.int64)
    if len(lesions):
        hooked = assignment.matched_lesion[assignment.labels]
        np.add.at(counts, hooked, 1)
    return counts
