"""Cluster-level image coherence test.

Images of a candidate are split by image into a training and a test side,
each image contributes ``c`` random crops, an autoencoder is trained on the
training crops, and the candidate is rejected when the mean reconstruction
error of the test crops is at least ``threshold`` times that of the
training crops.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autoencoder as ae
from .core_types import DetectorConfig, EventCandidate, Tweet

log = logging.getLogger(__name__)


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def image_id_of(ref: str) -> str:
    return PurePosixPath(ref).stem


# ---------------------------------------------------------------- annotations

@dataclass(frozen=True)
class PersonBox:
    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float = 1.0

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinate {v} outside [0, 1]")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError("box corners out of order")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class HumanAnnotation:
    image_id: str
    person_boxes: tuple[PersonBox, ...] = ()

    def to_json(self) -> dict:
        return {"image_id": self.image_id,
                "boxes": [{"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1,
                           "confidence": b.confidence} for b in self.person_boxes]}


def parse_annotation(record: Mapping) -> HumanAnnotation:
    boxes = tuple(PersonBox(float(b["x0"]), float(b["y0"]), float(b["x1"]), float(b["y1"]),
                            float(b.get("confidence", 1.0)))
                  for b in record.get("boxes", []))
    return HumanAnnotation(str(record["image_id"]), boxes)


def read_annotations(path: str | Path) -> dict[str, HumanAnnotation]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ann = parse_annotation(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad annotation ({exc})") from exc
            out[ann.image_id] = ann
    return out


def write_annotations(path: str | Path, annotations: Iterable[HumanAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(json.dumps(a.to_json()) + "\n")


def union_area(boxes: Sequence[PersonBox]) -> float:
    """Exact area of the union of axis-aligned boxes, by coordinate compression."""
    if not boxes:
        return 0.0
    xs = sorted({b.x0 for b in boxes} | {b.x1 for b in boxes})
    ys = sorted({b.y0 for b in boxes} | {b.y1 for b in boxes})
    covered = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    xi = {x: i for i, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    for b in boxes:
        covered[xi[b.x0]:xi[b.x1], yi[b.y0]:yi[b.y1]] = True
    w = np.diff(xs)
    h = np.diff(ys)
    return float(w @ covered @ h)


def is_human_image(annotation: HumanAnnotation, total_threshold: float = 0.40,
                   single_threshold: float = 0.20) -> bool:
    boxes = annotation.person_boxes
    if any(b.area >= single_threshold for b in boxes):
        return True
    return union_area(boxes) >= total_threshold


def filter_human_images(image_ids: Sequence[str], annotations: Mapping[str, HumanAnnotation],
                        config: DetectorConfig) -> list[str]:
    kept = []
    for iid in image_ids:
        ann = annotations.get(iid)
        if ann is None:
            log.warning("no human annotation for image %s; assuming no people", iid)
            ann = HumanAnnotation(iid)
        if not is_human_image(ann, config.human_area_total_threshold,
                              config.human_area_single_threshold):
            kept.append(iid)
    return kept


# ---------------------------------------------------------------------- images

def load_image(path: str | Path) -> np.ndarray:
    """Decode PNG/PPM (anything Pillow reads) to an (H, W, 3) float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "F"):
            arr = np.asarray(im.convert("F"), dtype=np.float64)
            scale = 65535.0 if im.mode.startswith("I") and arr.max() > 255 else 255.0
            arr = np.repeat((arr / scale)[..., None], 3, axis=2)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


class ImageStore:
    """Resolves tweet image references to pixel arrays, relative to ``root``."""

    def __init__(self, root: str | Path | None = None,
                 arrays: Mapping[str, np.ndarray] | None = None):
        self.root = Path(root) if root is not None else None
        self._arrays = dict(arrays or {})
        self._paths: dict[str, str] = {}

    def register(self, ref: str) -> str:
        iid = image_id_of(ref)
        self._paths.setdefault(iid, ref)
        return iid

    def get(self, image_id: str) -> np.ndarray | None:
        if image_id in self._arrays:
            return self._arrays[image_id]
        ref = self._paths.get(image_id)
        if ref is None:
            return None
        path = Path(ref)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        try:
            arr = load_image(path)
        except (OSError, ValueError) as exc:
            log.warning("cannot read image %s: %s", path, exc)
            return None
        self._arrays[image_id] = arr
        return arr


# ----------------------------------------------------------------------- crops

def crop_offsets(shape: tuple[int, int], c: int, crop_size: int,
                 rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    return np.stack([rng.integers(0, h - crop_size + 1, c),
                     rng.integers(0, w - crop_size + 1, c)], axis=1)


def crop_array(image: np.ndarray, c: int, crop_size: int, seed: int,
               image_id: str = "") -> np.ndarray | None:
    """(c, crop_size, crop_size, 3) crops at uniform offsets; None if the image is too small."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    h, w = image.shape[:2]
    if h < crop_size or w < crop_size:
        log.warning("image %s (%dx%d) smaller than crop size %d; skipped",
                    image_id, h, w, crop_size)
        return None
    rng = np.random.default_rng([seed, stable_hash(image_id)])
    offs = crop_offsets((h, w), c, crop_size, rng)
    win = np.lib.stride_tricks.sliding_window_view(image, (crop_size, crop_size), axis=(0, 1))
    # win: (h-s+1, w-s+1, 3, s, s)
    return np.clip(win[offs[:, 0], offs[:, 1]].transpose(0, 2, 3, 1), 0.0, 1.0)


def generate_crops(image: np.ndarray, c: int, crop_size: int, seed: int,
                   image_id: str = "") -> list[ae.Crop]:
    arr = crop_array(image, c, crop_size, seed, image_id)
    if arr is None:
        return []
    return [ae.Crop(arr[i], image_id, i) for i in range(len(arr))]


# ------------------------------------------------------------------- partition

@dataclass(frozen=True)
class CropPartition:
    train_images: tuple[str, ...]
    test_images: tuple[str, ...]
    crops_per_image: int

    def __post_init__(self):
        if not self.train_images or not self.test_images:
            raise ValueError("both sides of the partition must be non-empty")
        if set(self.train_images) & set(self.test_images):
            raise ValueError("an image cannot be on both sides")


def split_partition(image_ids: Sequence[str], train_fraction: float = 2.0 / 3.0,
                    seed: int = 0, crops_per_image: int = 500,
                    min_images: int = 3) -> CropPartition | None:
    """Shuffle images and put the first floor(fraction * k) on the training side.

    Returns None (bypass) with fewer than ``min_images`` images.
    """
    ids = list(dict.fromkeys(image_ids))
    k = len(ids)
    if k < max(min_images, 2):
        return None
    rng = np.random.default_rng([seed, stable_hash("|".join(sorted(ids)))])
    order = [ids[i] for i in rng.permutation(k)]
    n_train = min(max(math.floor(train_fraction * k + 1e-9), 1), k - 1)
    return CropPartition(tuple(order[:n_train]), tuple(order[n_train:]), crops_per_image)


# ---------------------------------------------------------------------- ratio

@dataclass(frozen=True)
class REStats:
    errors: tuple[float, ...]
    mean: float
    median: float
    variance: float

    @classmethod
    def of(cls, errors) -> "REStats":
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            raise ValueError("no reconstruction errors")
        if np.any(e < 0):
            raise ValueError("reconstruction errors must be non-negative")
        return cls(tuple(e.tolist()), float(e.mean()), float(np.median(e)), float(e.var()))

    def summary(self) -> dict:
        return {"n": len(self.errors), "mean": self.mean, "median": self.median,
                "variance": self.variance}


def _ratio(a: float, b: float) -> float | None:
    return a / b if b > 0 else None


@dataclass(frozen=True)
class CoherenceReport:
    R_mean: float | None
    R_median: float | None
    R_variance: float | None
    train: REStats
    test: REStats
    verdict: str
    images_used: int
    threshold: float = 1.5
    degenerate: bool = False
    train_images: tuple[str, ...] = ()
    test_images: tuple[str, ...] = ()
    final_train_loss: float | None = None

    def to_dict(self) -> dict:
        return {"R_mean": self.R_mean, "R_median": self.R_median,
                "R_variance": self.R_variance, "verdict": self.verdict,
                "threshold": self.threshold, "degenerate": self.degenerate,
                "images_used": self.images_used, "train_images": list(self.train_images),
                "test_images": list(self.test_images), "train": self.train.summary(),
                "test": self.test.summary(), "final_train_loss": self.final_train_loss}


def report_from_errors(train_errors, test_errors, threshold: float = 1.5,
                       images_used: int = 0, **extra) -> CoherenceReport:
    """Mean test error over mean training error, and the accept/reject verdict."""
    train = REStats.of(train_errors)
    test = REStats.of(test_errors)
    if train.mean == 0.0:
        # perfect reconstruction of the training side: nothing to compare against
        return CoherenceReport(None, None, None, train, test, "accept", images_used,
                               threshold, True, **extra)
    r_mean = test.mean / train.mean
    verdict = "reject" if r_mean >= threshold else "accept"
    return CoherenceReport(r_mean, _ratio(test.median, train.median),
                           _ratio(test.variance, train.variance), train, test, verdict,
                           images_used, threshold, False, **extra)


def coherence_ratio(model: ae.AEModel, partition: CropPartition,
                    crops: Mapping[str, np.ndarray], threshold: float = 1.5) -> CoherenceReport:
    """Score every crop of both sides with ``model`` (trained on the training side)."""
    train = np.concatenate([ae.reconstruction_errors(model, crops[i])
                            for i in partition.train_images])
    test = np.concatenate([ae.reconstruction_errors(model, crops[i])
                           for i in partition.test_images])
    return report_from_errors(train, test, threshold,
                              len(partition.train_images) + len(partition.test_images),
                              train_images=partition.train_images,
                              test_images=partition.test_images,
                              final_train_loss=model.final_loss)


def score_images(images: Mapping[str, np.ndarray], config: DetectorConfig,
                 seed: int | None = None) -> CoherenceReport | None:
    """Crops, split, train and ratio for a set of already-selected images.

    Returns None when fewer than ``min_images`` usable images remain.
    """
    seed = config.rng_seed if seed is None else seed
    crops = {}
    for iid in sorted(images):
        arr = crop_array(images[iid], config.crops_per_image, config.crop_size, seed, iid)
        if arr is not None:
            crops[iid] = arr
    partition = split_partition(list(crops), config.train_crop_fraction, seed,
                                config.crops_per_image, config.min_images)
    if partition is None:
        return None
    train_x = np.concatenate([crops[i] for i in partition.train_images])
    model = ae.init(seed, config.crop_size)
    model = ae.train(model, train_x, config.ae_epochs, config.ae_learning_rate,
                     config.ae_batch_size, seed)
    return coherence_ratio(model, partition, crops, config.coherence_threshold)


# -------------------------------------------------------------------- selection

def select_images(candidate: EventCandidate, store: ImageStore,
                  annotations: Mapping[str, HumanAnnotation],
                  config: DetectorConfig) -> list[str]:
    """Non-human images posted in tweets that carry at least one top keyword."""
    top = {kw for kw, _ in candidate.top_keywords}
    seen: dict[str, tuple[int, str]] = {}
    for t in candidate.tweets:
        if not top.intersection(t.tags):
            continue
        for ref in t.image_refs:
            iid = store.register(ref)
            key = (t.timestamp, iid)
            if iid not in seen or key < seen[iid]:
                seen[iid] = key
    ordered = [iid for iid, _ in sorted(seen.items(), key=lambda kv: kv[1])]
    return filter_human_images(ordered, annotations, config)


@dataclass
class ImageAnalysis:
    verdict: str                      # accept | reject | bypass
    report: CoherenceReport | None = None
    degraded: bool = False
    images: tuple[str, ...] = ()
    note: str = ""

    @property
    def keep(self) -> bool:
        return self.verdict != "reject"


def analyze_candidate(candidate: EventCandidate, store: ImageStore,
                      annotations: Mapping[str, HumanAnnotation], config: DetectorConfig,
                      cache: dict | None = None) -> ImageAnalysis:
    """Image gate for one pruned candidate.  Fails open: only a computed
    ratio at or above the threshold removes a candidate."""
    ids = select_images(candidate, store, annotations, config)
    pixels = {}
    for iid in ids:
        arr = store.get(iid)
        if arr is not None and min(arr.shape[:2]) >= config.crop_size:
            pixels[iid] = arr
    if len(pixels) < config.min_images:
        return ImageAnalysis("bypass", images=tuple(pixels),
                             note=f"{len(pixels)} eligible images")
    key = tuple(sorted(pixels))
    if cache is not None and key in cache:
        return cache[key]
    try:
        report = score_images(pixels, config)
    except ae.TrainingDivergedError as exc:
        log.warning("autoencoder diverged for %s: %s", candidate.cluster_id, exc)
        result = ImageAnalysis("accept", degraded=True, images=key, note=str(exc))
    else:
        if report is None:
            result = ImageAnalysis("bypass", images=key, note="too few usable images")
        else:
            result = ImageAnalysis(report.verdict, report, images=key)
    if cache is not None:
        cache[key] = result
    return result
