"""Dataset ingestion and preparation.

A dataset on disk is an index CSV (image_id,image_path,mask_path), a sibling
annotations CSV (image_id,center_x,center_y,bbox_w,bbox_h) and the referenced
image files. Loading applies the channel rule, an optional crop or resize with
annotation coordinates transformed alongside, and per-image min-max
normalization. Flip augmentation and the two-fold split live here as well.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from PIL import Image

from .anchors import LesionAnnotation
from .errors import AnnotationError, DataIOError, InvalidGeometryError, InvalidInputError, InvalidMaskError

MANIFEST_NAME = "manifest.csv"
ANNOTATIONS_NAME = "annotations.csv"

CHANNEL_RULES = ("grayscale", "green-extract")
RESIZE_MODES = ("crop", "resize")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: str
    mask_path: str | None
    lesions: tuple[LesionAnnotation, ...]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    channel_rule: str = "grayscale"
    target_size: tuple[int, int] | None = None  # (H, W); None keeps native size
    resize_mode: str = "crop"

    def __post_init__(self):
        if self.channel_rule not in CHANNEL_RULES:
            raise InvalidInputError(f"unknown channel rule {self.channel_rule!r}")
        if self.resize_mode not in RESIZE_MODES:
            raise InvalidInputError(f"unknown resize mode {self.resize_mode!r}")
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise AnnotationError("manifest contains duplicate image ids")

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


def read_manifest(
    dataset_dir: str,
    channel_rule: str = "grayscale",
    target_size: tuple[int, int] | None = None,
    resize_mode: str = "crop",
) -> DatasetManifest:
    """Read manifest.csv and annotations.csv from a dataset directory.

    Relative image/mask paths are resolved against the directory.
    """
    manifest_path = os.path.join(dataset_dir, MANIFEST_NAME)
    annotations_path = os.path.join(dataset_dir, ANNOTATIONS_NAME)
    for p in (manifest_path, annotations_path):
        if not os.path.exists(p):
            raise DataIOError(f"missing dataset file: {p}")

    lesions_by_id: dict[str, list[LesionAnnotation]] = {}
    with open(annotations_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["image_id", "center_x", "center_y", "bbox_w", "bbox_h"]
        if reader.fieldnames != expected:
            raise DataIOError(f"bad annotations header {reader.fieldnames}, expected {expected}")
        for row in reader:
            try:
                lesion = LesionAnnotation(
                    center_x=float(row["center_x"]),
                    center_y=float(row["center_y"]),
                    bbox_width=float(row["bbox_w"]),
                    bbox_height=float(row["bbox_h"]),
                )
            except (TypeError, ValueError) as exc:
                raise AnnotationError(f"malformed annotation row {row}: {exc}") from exc
            lesions_by_id.setdefault(row["image_id"], []).append(lesion)

    entries = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["image_id", "image_path", "mask_path"]:
            raise DataIOError(f"bad manifest header {reader.fieldnames}")
        for row in reader:
            image_id = row["image_id"]
            mask = row["mask_path"].strip()
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    image_path=os.path.join(dataset_dir, row["image_path"]),
                    mask_path=os.path.join(dataset_dir, mask) if mask else None,
                    lesions=tuple(lesions_by_id.get(image_id, ())),
                )
            )
    known = {e.image_id for e in entries}
    orphans = set(lesions_by_id) - known
    if orphans:
        raise AnnotationError(f"annotations reference unknown image ids: {sorted(orphans)[:5]}")
    return DatasetManifest(
        entries=tuple(entries),
        channel_rule=channel_rule,
        target_size=target_size,
        resize_mode=resize_mode,
    )


def write_manifest(dataset_dir: str, entries: Sequence[ManifestEntry]) -> None:
    """Write manifest.csv and annotations.csv with paths relative to dataset_dir."""
    with open(os.path.join(dataset_dir, MANIFEST_NAME), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "image_path", "mask_path"])
        for e in entries:
            writer.writerow([e.image_id, os.path.relpath(e.image_path, dataset_dir),
                             os.path.relpath(e.mask_path, dataset_dir) if e.mask_path else ""])
    with open(os.path.join(dataset_dir, ANNOTATIONS_NAME), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "center_x", "center_y", "bbox_w", "bbox_h"])
        for e in entries:
            for l in e.lesions:
                writer.writerow([e.image_id, f"{l.center_x:.4f}", f"{l.center_y:.4f}",
                                 f"{l.bbox_width:.4f}", f"{l.bbox_height:.4f}"])


@dataclass(frozen=True)
class Sample:
    """One fully prepared image: pixels in [0, 1], a boolean tissue mask of the
    same shape, and lesions in the prepared coordinate frame."""

    image_id: str
    pixels: np.ndarray
    mask: np.ndarray
    lesions: tuple[LesionAnnotation, ...]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self, image_id: str) -> Sample:
        for s in self.samples:
            if s.image_id == image_id:
                return s
        raise KeyError(image_id)

    @property
    def lesions_by_image(self) -> dict[str, tuple[LesionAnnotation, ...]]:
        return {s.image_id: s.lesions for s in self.samples}


def _decode_image(path: str, channel_rule: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataIOError(f"image file not found: {path}")
    with Image.open(path) as im:
        if channel_rule == "green-extract":
            if im.mode not in ("RGB", "RGBA"):
                raise InvalidInputError(f"green-extract needs an RGB image, {path} is {im.mode}")
            arr = np.asarray(im)[:, :, 1]
        else:
            if im.mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("L"))
            elif im.mode in ("L", "I", "I;16"):
                arr = np.asarray(im)
            else:
                raise InvalidInputError(f"unsupported image mode {im.mode} in {path}")
    return arr.astype(np.float64)


def min_max_normalize(pixels: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant image maps to all zeros."""
    lo = float(pixels.min())
    hi = float(pixels.max())
    if hi == lo:
        return np.zeros_like(pixels, dtype=np.float32)
    return ((pixels - lo) / (hi - lo)).astype(np.float32)


def tissue_mask_default(pixels: np.ndarray) -> np.ndarray:
    """All-ones mask for datasets without mask files; real data should supply
    masks through the manifest instead."""
    return np.ones(pixels.shape, dtype=bool)


def _crop_offsets(h: int, w: int, target: tuple[int, int]) -> tuple[int, int]:
    th, tw = target
    if th > h or tw > w:
        raise InvalidGeometryError(f"cannot crop {h}x{w} image to larger {th}x{tw}")
    return (h - th) // 2, (w - tw) // 2


def _prepare_entry(entry: ManifestEntry, manifest: DatasetManifest) -> Sample:
    pixels = _decode_image(entry.image_path, manifest.channel_rule)
    h, w = pixels.shape
    lesions = list(entry.lesions)

    if entry.mask_path is not None:
        with Image.open(entry.mask_path) as im:
            mask = np.asarray(im.convert("L")) > 0
        if mask.shape != pixels.shape:
            raise InvalidMaskError(
                f"mask {entry.mask_path} is {mask.shape}, image is {pixels.shape}"
            )
    else:
        mask = tissue_mask_default(pixels)

    if manifest.target_size is not None and (h, w) != manifest.target_size:
        th, tw = manifest.target_size
        if manifest.resize_mode == "crop":
            oy, ox = _crop_offsets(h, w, (th, tw))
            pixels = pixels[oy:oy + th, ox:ox + tw]
            mask = mask[oy:oy + th, ox:ox + tw]
            lesions = [
                replace(l, center_x=l.center_x - ox, center_y=l.center_y - oy) for l in lesions
            ]
        else:
            sx, sy = tw / w, th / h
            pixels = np.asarray(
                Image.fromarray(pixels).resize((tw, th), Image.BILINEAR), dtype=np.float64
            )
            mask = np.asarray(
                Image.fromarray(mask.astype(np.uint8)).resize((tw, th), Image.NEAREST)
            ) > 0
            lesions = [
                LesionAnnotation(l.center_x * sx, l.center_y * sy,
                                 l.bbox_width * sx, l.bbox_height * sy)
                for l in lesions
            ]
        h, w = th, tw

    for l in lesions:
        if not (0 <= l.center_x < w and 0 <= l.center_y < h):
            raise AnnotationError(
                f"lesion center ({l.center_x:.1f}, {l.center_y:.1f}) of {entry.image_id} "
                f"falls outside the {h}x{w} prepared image"
            )
    return Sample(
        image_id=entry.image_id,
        pixels=min_max_normalize(pixels),
        mask=mask,
        lesions=tuple(lesions),
    )


def load_dataset(manifest: DatasetManifest) -> Dataset:
    """Decode, transform and normalize every manifest entry.

    All prepared images must share one size, which the grid geometry depends on.
    """
    samples = [_prepare_entry(e, manifest) for e in manifest.entries]
    sizes = {s.pixels.shape for s in samples}
    if len(sizes) > 1:
        raise InvalidGeometryError(
            f"dataset mixes image sizes {sorted(sizes)}; set a target size to unify them"
        )
    return Dataset(samples=tuple(samples), manifest=manifest)


def flip_sample(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Mirror pixels, mask and lesion coordinates. Applying the same flip twice
    restores the original exactly."""
    pixels = sample.pixels
    mask = sample.mask
    h, w = pixels.shape
    if horizontal:
        pixels = pixels[:, ::-1]
        mask = mask[:, ::-1]
    if vertical:
        pixels = pixels[::-1, :]
        mask = mask[::-1, :]
    lesions = tuple(
        replace(
            l,
            center_x=(w - 1 - l.center_x) if horizontal else l.center_x,
            center_y=(h - 1 - l.center_y) if vertical else l.center_y,
        )
        for l in sample.lesions
    )
    suffix = ("+h" if horizontal else "") + ("+v" if vertical else "")
    return Sample(
        image_id=sample.image_id + suffix,
        pixels=np.ascontiguousarray(pixels),
        mask=np.ascontiguousarray(mask),
        lesions=lesions,
    )


def augment_flips(sample: Sample) -> list[Sample]:
    """The three mirrored companions of a sample: horizontal, vertical, both."""
    return [
        flip_sample(sample, True, False),
        flip_sample(sample, False, True),
        flip_sample(sample, True, True),
    ]


@dataclass(frozen=True)
class FoldSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class TwoFoldSplit:
    folds: tuple[FoldSplit, FoldSplit]

    def __getitem__(self, fold: int) -> FoldSplit:
        return self.folds[fold]


def split_twofold(
    image_ids: Sequence[str],
    validation_fraction: float = 0.3,
    seed: int = 0,
    unhealthy: Sequence[str] | None = None,
) -> TwoFoldSplit:
    """Partition images into two equal folds (first fold gets the odd one) and
    carve a validation subset out of each fold's training half.

    Passing the unhealthy image ids stratifies the validation draw so both
    train and validation keep lesion-bearing images. The split is a pure
    function of the sorted id list and the seed.
    """
    if not image_ids:
        raise InvalidInputError("cannot split an empty dataset")
    if not 0 <= validation_fraction < 1:
        raise InvalidInputError(f"validation fraction must lie in [0, 1), got {validation_fraction}")
    ids = sorted(image_ids)
    if len(set(ids)) != len(ids):
        raise InvalidInputError("image ids must be unique")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    half = (len(ids) + 1) // 2
    fold_lists = (perm[:half], perm[half:])

    unhealthy_set = set(unhealthy) if unhealthy is not None else None
    folds = []
    for fold_index, members in enumerate(fold_lists):
        other = fold_lists[1 - fold_index]
        val_rng = np.random.default_rng((seed, fold_index))
        n_val = int(len(members) * validation_fraction + 0.5)
        if unhealthy_set is None:
            chosen = val_rng.choice(len(members), size=n_val, replace=False)
            val = {members[i] for i in chosen}
        else:
            # draw proportionally from the unhealthy and healthy strata
            sick = [m for m in members if m in unhealthy_set]
            well = [m for m in members if m not in unhealthy_set]
            n_sick = min(len(sick), int(len(sick) * validation_fraction + 0.5))
            val = set()
            if sick:
                val.update(sick[i] for i in val_rng.choice(len(sick), size=n_sick, replace=False))
            n_rest = min(len(well), n_val - len(val))
            if well and n_rest > 0:
                val.update(well[i] for i in val_rng.choice(len(well), size=n_rest, replace=False))
        folds.append(
            FoldSplit(
                train_ids=tuple(m for m in members if m not in val),
                val_ids=tuple(m for m in members if m in val),
                test_ids=tuple(other),
            )
        )
    return TwoFoldSplit(folds=(folds[0], folds[1]))
