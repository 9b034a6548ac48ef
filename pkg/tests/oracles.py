"""Brute-force reference implementations used by the evaluation and acceptance
tests. Deliberately naive and structurally independent of the package code:
matching is recomputed from scratch at every threshold and the area comes from
numpy's trapezoid on an explicitly clipped polyline."""

import math

import numpy as np


def oracle_counts(dets, lesions, threshold):
    subset = [d for d in sorted(dets, key=lambda d: -d.score) if d.score > threshold]
    claimed = set()
    tp = 0
    for d in subset:
        best, best_dist = None, None
        for li, l in enumerate(lesions):
            dist = math.hypot(d.x - l.center_x, d.y - l.center_y)
            if dist <= max(l.bbox_width, l.bbox_height) and li not in claimed:
                if best_dist is None or dist < best_dist:
                    best, best_dist = li, dist
        if best is not None:
            claimed.add(best)
            tp += 1
    return tp, len(subset) - tp


def oracle_curve(dets_by_img, lesions_by_img):
    n_images = len(lesions_by_img)
    n_lesions = sum(len(v) for v in lesions_by_img.values())
    scores = sorted({d.score for dets in dets_by_img.values() for d in dets}, reverse=True)
    # the strict sweep at the top score repeats the anchor, so start below it
    thresholds = scores[1:] + [min(scores) - 1.0] if scores else []
    points = [(0.0, 0.0)]
    for t in thresholds:
        tp = fp = 0
        for img, lesions in lesions_by_img.items():
            a, b = oracle_counts(dets_by_img.get(img, []), lesions, t)
            tp += a
            fp += b
        points.append((fp / n_images, tp / n_lesions))
    return points


def oracle_aufc(points, limit):
    fppi = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    if fppi[-1] < limit:
        fppi = np.append(fppi, limit)
        tpr = np.append(tpr, tpr[-1])
    elif fppi[-1] > limit:
        inside = fppi <= limit
        t_at = np.interp(limit, fppi, tpr)
        fppi = np.append(fppi[inside], limit)
        tpr = np.append(tpr[inside], t_at)
    return float(np.trapezoid(tpr, fppi)) / limit
