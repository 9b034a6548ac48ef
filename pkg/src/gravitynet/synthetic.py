"""Synthetic small-lesion images for desk-scale runs.

Each image is low-frequency tissue-like shading plus Gaussian pixel noise,
a handful of elongated streaks standing in for vessels and ducts, and a few
Gaussian-profile blobs whose exact centers become the ground truth. Every
byte of the output is a pure function of the spec, seed included.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .anchors import LesionAnnotation
from .data import DatasetManifest, ManifestEntry, write_manifest
from .errors import InvalidInputError, PlacementError

SPEC_NAME = "spec.json"
IMAGE_DIR = "images"

# streak rendering constants; distractors stay dimmer than the dimmest lesion
_STREAK_AMPLITUDE = (0.08, 0.18)
_STREAK_LENGTH = (30.0, 90.0)
_STREAK_WIDTH = (0.8, 1.6)

_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SyntheticSpec:
    image_count: int = 200
    image_size: tuple[int, int] = (256, 256)  # (H, W)
    lesions_per_image: tuple[int, int] = (3, 8)
    lesion_radius: tuple[float, float] = (2.0, 3.0)
    lesion_contrast: tuple[float, float] = (0.40, 0.75)
    background_noise_sigma: float = 0.025
    distractor_count: tuple[int, int] = (2, 6)
    lesion_polarity: str = "bright"
    rng_seed: int = 1234

    def __post_init__(self):
        if self.image_count < 1:
            raise InvalidInputError("image_count must be >= 1")
        if min(self.image_size) < 32:
            raise InvalidInputError(f"image_size too small: {self.image_size}")
        for name in ("lesions_per_image", "lesion_radius", "lesion_contrast", "distractor_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidInputError(f"{name} range is inverted: ({lo}, {hi})")
        if self.lesions_per_image[0] < 0 or self.distractor_count[0] < 0:
            raise InvalidInputError("counts must be >= 0")
        if self.lesion_radius[0] < 1:
            raise InvalidInputError(f"lesion_radius must be >= 1, got {self.lesion_radius[0]}")
        if self.lesion_contrast[0] <= 0:
            raise InvalidInputError(f"lesion_contrast must be positive, got {self.lesion_contrast[0]}")
        if self.background_noise_sigma < 0:
            raise InvalidInputError("background_noise_sigma must be >= 0")
        if self.lesion_polarity not in ("bright", "dark"):
            raise InvalidInputError(f"lesion_polarity must be bright or dark, got {self.lesion_polarity!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"synthetic spec is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidInputError(f"synthetic spec must be a JSON object, got {type(raw).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidInputError(f"unknown synthetic spec fields: {sorted(unknown)}")
        for f in dataclasses.fields(cls):
            if f.name in raw and isinstance(raw[f.name], list):
                raw[f.name] = tuple(raw[f.name])
        return cls(**raw)


def lesion_layer(height: int, width: int, lesions: list[LesionAnnotation]) -> np.ndarray:
    """Unit-amplitude Gaussian blob per lesion, sigma tied to the bbox radius.

    This is the clean signal layer the generator adds (up to per-lesion
    contrast), so blob centers can be re-detected from it exactly.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    layer = np.zeros((height, width), dtype=np.float64)
    for l in lesions:
        sigma = l.bbox_width / 4.0  # bbox side is 2*radius, profile sigma is radius/2
        d2 = (xx - l.center_x) ** 2 + (yy - l.center_y) ** 2
        layer += np.exp(-d2 / (2.0 * sigma * sigma))
    return layer


def _place_lesions(rng: np.random.Generator, spec: SyntheticSpec) -> list[tuple[float, float, float]]:
    h, w = spec.image_size
    count = int(rng.integers(spec.lesions_per_image[0], spec.lesions_per_image[1] + 1))
    placed: list[tuple[float, float, float]] = []
    margin = 2.0 * spec.lesion_radius[1]
    for _ in range(count):
        for _ in range(_PLACEMENT_TRIES):
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))
            r = float(rng.uniform(*spec.lesion_radius))
            # keep blobs well separated so each annotation owns its local maximum
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (4.0 * max(r, pr)) ** 2 for px, py, pr in placed):
                placed.append((cx, cy, r))
                break
        else:
            raise PlacementError(
                f"could not place {count} non-overlapping lesions in a {h}x{w} image"
            )
    return placed


def render_image(rng: np.random.Generator, spec: SyntheticSpec):
    """One synthetic image in [0, 1] plus its lesion annotations."""
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    img = np.full((h, w), 0.35, dtype=np.float64)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0.0, 2.0 * np.pi, size=2)
        amp = rng.uniform(0.02, 0.07)
        img += amp * np.cos(2 * np.pi * fx * xx / w + px) * np.cos(2 * np.pi * fy * yy / h + py)

    n_streaks = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    for _ in range(n_streaks):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        angle = rng.uniform(0.0, np.pi)
        length = rng.uniform(*_STREAK_LENGTH)
        width = rng.uniform(*_STREAK_WIDTH)
        amp = rng.uniform(*_STREAK_AMPLITUDE)
        dx, dy = np.cos(angle), np.sin(angle)
        t = np.clip((xx - x0) * dx + (yy - y0) * dy, 0.0, length)
        d2 = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
        img += amp * np.exp(-d2 / (2.0 * width * width))

    lesions = []
    for cx, cy, r in _place_lesions(rng, spec):
        lesions.append(LesionAnnotation(cx, cy, 2.0 * r, 2.0 * r))
    sign = 1.0 if spec.lesion_polarity == "bright" else -1.0
    contrasts = [float(rng.uniform(*spec.lesion_contrast)) for _ in lesions]
    for l, c in zip(lesions, contrasts):
        sigma = l.bbox_width / 4.0
        d2 = (xx - l.center_x) ** 2 + (yy - l.center_y) ** 2
        img += sign * c * np.exp(-d2 / (2.0 * sigma * sigma))

    if spec.background_noise_sigma > 0:
        img += rng.normal(0.0, spec.background_noise_sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0), lesions


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> DatasetManifest:
    """Write the dataset (16-bit PNGs, manifest, annotations, provenance record)."""
    os.makedirs(os.path.join(out_dir, IMAGE_DIR), exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    digits = max(3, len(str(spec.image_count - 1)))
    entries = []
    for i in range(spec.image_count):
        pixels, lesions = render_image(rng, spec)
        image_id = f"synth_{i:0{digits}d}"
        rel = os.path.join(IMAGE_DIR, image_id + ".png")
        path = os.path.join(out_dir, rel)
        Image.fromarray(np.round(pixels * 65535.0).astype(np.uint16)).save(path)
        entries.append(
            ManifestEntry(image_id=image_id, image_path=path, mask_path=None, lesions=tuple(lesions))
        )
    write_manifest(out_dir, entries)
    with open(os.path.join(out_dir, SPEC_NAME), "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
    return DatasetManifest(entries=tuple(entries), channel_rule="grayscale")
