"""Lesion-based FROC analysis.

Detections are matched to lesions image by image (distance no larger than the
largest bounding-box side, one TP per lesion, duplicates count as FP), swept
over score thresholds into a FROC curve, and summarized by the normalized
partial area under that curve. Two detection sets are compared with a
case-resampling bootstrap on that figure of merit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .anchors import LesionAnnotation
from .errors import ComparisonError, InvalidInputError, UndefinedTprError
from .inference import Detection

FPPI_GRID_POINTS = 101


@dataclass(frozen=True)
class EvalConfig:
    fppi_limit: float = 10.0
    bootstrap_iterations: int = 1000
    significance_level: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.fppi_limit <= 0:
            raise InvalidInputError(f"fppi limit must be positive, got {self.fppi_limit}")
        if self.bootstrap_iterations < 1:
            raise InvalidInputError("need at least one bootstrap iteration")


@dataclass(frozen=True)
class MatchedImage:
    """Matching outcome for one image: detection scores (descending) with their
    TP/FP verdicts, plus which lesions were hit."""

    image_id: str
    scores: np.ndarray
    is_tp: np.ndarray
    lesion_hit: np.ndarray

    @property
    def n_lesions(self) -> int:
        return len(self.lesion_hit)


def match_detections(
    detections: Sequence[Detection],
    lesions: Sequence[LesionAnnotation],
    image_id: str = "",
) -> MatchedImage:
    """Greedy TP/FP assignment in descending score order.

    A detection may claim a lesion whose center lies within the lesion's
    largest bounding-box side; among the still-unclaimed eligible lesions it
    takes the nearest (lowest index on distance ties). Later detections on an
    already-claimed lesion are false positives.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    scores = np.array([detections[i].score for i in order], dtype=np.float64)
    is_tp = np.zeros(len(detections), dtype=bool)
    claimed = np.zeros(len(lesions), dtype=bool)
    centers = np.array([[l.center_x, l.center_y] for l in lesions], dtype=np.float64).reshape(-1, 2)
    radii = np.array([max(l.bbox_width, l.bbox_height) for l in lesions], dtype=np.float64)
    for rank, i in enumerate(order):
        d = detections[i]
        if len(lesions) == 0:
            continue
        dist = np.hypot(centers[:, 0] - d.x, centers[:, 1] - d.y)
        eligible = (dist <= radii) & ~claimed
        if eligible.any():
            candidates = np.flatnonzero(eligible)
            best = candidates[np.argmin(dist[candidates])]
            claimed[best] = True
            is_tp[rank] = True
    return MatchedImage(image_id=image_id, scores=scores, is_tp=is_tp, lesion_hit=claimed)


def match_dataset(
    detections_by_image: Mapping[str, Sequence[Detection]],
    lesions_by_image: Mapping[str, Sequence[LesionAnnotation]],
) -> list[MatchedImage]:
    """Match every image of a split. Healthy images and images with no
    detections both contribute, they just bring empty arrays."""
    missing = set(detections_by_image) - set(lesions_by_image)
    if missing:
        raise ComparisonError(f"detections reference unknown image ids: {sorted(missing)[:5]}")
    return [
        match_detections(detections_by_image.get(image_id, ()), lesions_by_image[image_id], image_id)
        for image_id in sorted(lesions_by_image)
    ]


@dataclass(frozen=True)
class FROCCurve:
    """Operating points ordered by ascending FPpI. thresholds[i] is the score
    cut generating point i; the leading (0, 0) anchor carries +inf."""

    thresholds: np.ndarray
    fppi: np.ndarray
    tpr: np.ndarray

    def __len__(self) -> int:
        return len(self.fppi)


def _sweep(tp_scores: np.ndarray, fp_scores: np.ndarray, n_images: int, n_lesions: int):
    """Threshold sweep shared by froc_curve and the bootstrap fast path."""
    tp_sorted = np.sort(tp_scores)
    fp_sorted = np.sort(fp_scores)
    cuts = np.unique(np.concatenate([tp_sorted, fp_sorted]))[::-1]
    # counts of detections at or above each cut, i.e. strictly above any
    # threshold just below it
    tp_counts = len(tp_sorted) - np.searchsorted(tp_sorted, cuts, side="left")
    fp_counts = len(fp_sorted) - np.searchsorted(fp_sorted, cuts, side="left")
    thresholds = np.concatenate([[math.inf], cuts])
    fppi = np.concatenate([[0.0], fp_counts / n_images])
    tpr = np.concatenate([[0.0], tp_counts / n_lesions])
    return thresholds, fppi, tpr


def froc_curve(matched: Sequence[MatchedImage]) -> FROCCurve:
    """Pool all images and emit one operating point per distinct score, plus the
    (0, 0) anchor. FPpI divides by every image, healthy ones included."""
    if not matched:
        raise InvalidInputError("froc_curve needs at least one image")
    n_lesions = sum(m.n_lesions for m in matched)
    if n_lesions == 0:
        raise UndefinedTprError("no lesions in the evaluated set, TPR is undefined")
    tp_scores = np.concatenate([m.scores[m.is_tp] for m in matched])
    fp_scores = np.concatenate([m.scores[~m.is_tp] for m in matched])
    thresholds, fppi, tpr = _sweep(tp_scores, fp_scores, len(matched), n_lesions)
    return FROCCurve(thresholds=thresholds, fppi=fppi, tpr=tpr)


def _partial_area(fppi: np.ndarray, tpr: np.ndarray, limit: float) -> float:
    area = 0.0
    prev_f, prev_t = fppi[0], tpr[0]
    for f, t in zip(fppi[1:], tpr[1:]):
        if f >= limit:
            # cut the final segment at the integration limit
            t_at = prev_t if f == prev_f else prev_t + (t - prev_t) * (limit - prev_f) / (f - prev_f)
            area += (limit - prev_f) * (prev_t + t_at) / 2.0
            prev_f, prev_t = limit, t_at
            break
        area += (f - prev_f) * (prev_t + t) / 2.0
        prev_f, prev_t = f, t
    if prev_f < limit:
        # curve ends before the limit: extend horizontally at the final TPR
        area += (limit - prev_f) * prev_t
    return float(area / limit)


def partial_aufc(curve: FROCCurve, fppi_limit: float) -> float:
    """Trapezoidal area under the curve for FPpI in [0, fppi_limit], divided by
    the limit so the result lies in [0, 1]."""
    if fppi_limit <= 0:
        raise InvalidInputError(f"fppi limit must be positive, got {fppi_limit}")
    return _partial_area(curve.fppi, curve.tpr, fppi_limit)


def _tpr_on_grid(fppi: np.ndarray, tpr: np.ndarray, grid: np.ndarray) -> np.ndarray:
    # step interpolation carrying the last reached TPR forward
    idx = np.searchsorted(fppi, grid, side="right") - 1
    return tpr[np.maximum(idx, 0)]


@dataclass(frozen=True)
class AveragedCurve:
    """Bootstrap mean TPR on a fixed FPpI grid with a 95% band along the TPR axis."""

    fppi_grid: np.ndarray
    mean_tpr: np.ndarray
    lower_tpr: np.ndarray
    upper_tpr: np.ndarray


@dataclass(frozen=True)
class BootstrapComparison:
    aufc_a: float
    aufc_b: float
    delta_samples: np.ndarray
    p_value: float
    curve_a: AveragedCurve
    curve_b: AveragedCurve
    iterations: int
    rng_seed: int
    significance_level: float

    @property
    def delta_mean(self) -> float:
        return float(self.delta_samples.mean())

    @property
    def significant(self) -> bool:
        return self.p_value < self.significance_level


def _per_image_arrays(matched: Sequence[MatchedImage]):
    tp = [m.scores[m.is_tp] for m in matched]
    fp = [m.scores[~m.is_tp] for m in matched]
    lesions = np.array([m.n_lesions for m in matched], dtype=np.int64)
    return tp, fp, lesions


def bootstrap_compare(
    results_a: Sequence[MatchedImage],
    results_b: Sequence[MatchedImage],
    config: EvalConfig = EvalConfig(),
) -> BootstrapComparison:
    """Case-resampling bootstrap of the AUFC difference between two methods.

    Each iteration redraws the image list with replacement (both methods see
    the same draw), recomputes both curves and their AUFC difference, and
    accumulates the TPR of both curves on a fixed FPpI grid. The p-value is the
    fraction of iterations where the difference is negative or zero, so a
    method compared with itself yields exactly 1.0. Iteration i uses its own
    generator seeded by (rng_seed, i), which makes the result independent of
    any execution order.
    """
    ids_a = [m.image_id for m in results_a]
    ids_b = [m.image_id for m in results_b]
    if ids_a != ids_b:
        raise ComparisonError("the two result sets do not cover the same image list")
    if not ids_a:
        raise ComparisonError("nothing to compare: empty image list")
    n = len(results_a)
    tp_a, fp_a, lesions = _per_image_arrays(results_a)
    tp_b, fp_b, lesions_b = _per_image_arrays(results_b)
    if not np.array_equal(lesions, lesions_b):
        raise ComparisonError("the two result sets disagree on per-image lesion counts")
    if int(lesions.sum()) == 0:
        raise UndefinedTprError("no lesions in the compared set, TPR is undefined")

    aufc_a = partial_aufc(froc_curve(results_a), config.fppi_limit)
    aufc_b = partial_aufc(froc_curve(results_b), config.fppi_limit)

    grid = np.linspace(0.0, config.fppi_limit, FPPI_GRID_POINTS)
    deltas = np.empty(config.bootstrap_iterations, dtype=np.float64)
    tpr_a = np.empty((config.bootstrap_iterations, FPPI_GRID_POINTS), dtype=np.float64)
    tpr_b = np.empty_like(tpr_a)

    for it in range(config.bootstrap_iterations):
        rng = np.random.default_rng((config.rng_seed, it))
        for _ in range(100):
            idx = rng.integers(0, n, size=n)
            if lesions[idx].sum() > 0:
                break
        else:
            raise UndefinedTprError("bootstrap kept drawing lesion-free resamples")
        n_lesions = int(lesions[idx].sum())
        aufcs = []
        for tp, fp, out in ((tp_a, fp_a, tpr_a), (tp_b, fp_b, tpr_b)):
            tp_pool = np.concatenate([tp[i] for i in idx])
            fp_pool = np.concatenate([fp[i] for i in idx])
            _, fppi, tpr = _sweep(tp_pool, fp_pool, n, n_lesions)
            aufcs.append(_partial_area(fppi, tpr, config.fppi_limit))
            out[it] = _tpr_on_grid(fppi, tpr, grid)
        deltas[it] = aufcs[0] - aufcs[1]

    p_value = float(np.mean(deltas <= 0.0))
    lo_a, hi_a = np.percentile(tpr_a, [2.5, 97.5], axis=0)
    lo_b, hi_b = np.percentile(tpr_b, [2.5, 97.5], axis=0)
    return BootstrapComparison(
        aufc_a=aufc_a,
        aufc_b=aufc_b,
        delta_samples=deltas,
        p_value=p_value,
        curve_a=AveragedCurve(grid, tpr_a.mean(axis=0), lo_a, hi_a),
        curve_b=AveragedCurve(grid, tpr_b.mean(axis=0), lo_b, hi_b),
        iterations=config.bootstrap_iterations,
        rng_seed=config.rng_seed,
        significance_level=config.significance_level,
    )


def write_froc(path: str, curve: FROCCurve) -> None:
    """threshold,fppi,tpr rows, one operating point per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fppi,tpr\n")
        for t, f, r in zip(curve.thresholds, curve.fppi, curve.tpr):
            fh.write(f"{t:.6f},{f:.6f},{r:.6f}\n")


def comparison_report(result: BootstrapComparison, name_a: str, name_b: str, n_images: int) -> str:
    verdict = "significant" if result.significant else "not significant"
    lines = [
        "bootstrap FROC comparison",
        f"method_a: {name_a}",
        f"method_b: {name_b}",
        f"images: {n_images}",
        f"iterations: {result.iterations}",
        f"rng_seed: {result.rng_seed}",
        f"aufc_a: {result.aufc_a:.6f}",
        f"aufc_b: {result.aufc_b:.6f}",
        f"delta_aufc_mean: {result.delta_mean:.6f}",
        f"p_value: {result.p_value:.6f}",
        f"significance_level: {result.significance_level}",
        f"verdict: {verdict}",
    ]
    return "\n".join(lines) + "\n"
