"""Prepared in-memory image sets: filtered, aligned, cropped frames plus their samples."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .augmentation import augment
from .data_model import Manifest, Sample
from .preprocessing import CropConfig, LandmarkSet, align_and_crop, frame_filter, load_landmarks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageSet:
    """Aligned uint8 crops (N, S, S, 3) with one Sample per row."""

    images: np.ndarray
    samples: tuple[Sample, ...]

    def __post_init__(self):
        if len(self.images) != len(self.samples):
            raise ValueError("images and samples differ in length")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight_kg for s in self.samples], dtype=np.float64)

    @property
    def keys(self) -> list[tuple]:
        return [s.key for s in self.samples]

    @property
    def patients(self) -> list[str]:
        return list(dict.fromkeys(s.patient_id for s in self.samples))

    def subset(self, idx: Sequence[int] | np.ndarray) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], tuple(self.samples[i] for i in idx))

    def where(self, pred) -> "ImageSet":
        return self.subset([i for i, s in enumerate(self.samples) if pred(s)])

    def for_patients(self, patients) -> "ImageSet":
        keep = set(patients)
        return self.where(lambda s: s.patient_id in keep)

    def days(self) -> list[int]:
        return sorted({s.day_index for s in self.samples})


def _cache_key(manifest: Manifest, crop: CropConfig, yaw_tol: float, mouth_tol: float, use_landmarks: bool) -> str:
    h = hashlib.sha1()
    h.update(json.dumps([crop.output_size, yaw_tol, mouth_tol, use_landmarks]).encode())
    for s in manifest.samples:
        h.update(f"{s.image_ref}|{s.weight_kg}|{s.session.value}".encode())
    return h.hexdigest()[:16]


def prepare_images(
    manifest: Manifest,
    landmarks: dict[str, LandmarkSet] | str | Path | None = None,
    crop: CropConfig = CropConfig(),
    yaw_tol: float = 0.15,
    mouth_tol: float = 0.25,
    cache_dir: str | Path | None = None,
) -> tuple[ImageSet, dict[str, int]]:
    """Load every manifest image, drop filtered frames, align and crop the rest.

    Without landmarks, images are only resized.  Returns the image set and a
    count of kept/discarded frames by reason.
    """
    if isinstance(landmarks, (str, Path)):
        landmarks = load_landmarks(landmarks)
    cache_file = None
    if cache_dir is not None:
        key = _cache_key(manifest, crop, yaw_tol, mouth_tol, landmarks is not None)
        cache_file = Path(cache_dir) / f"prepared_{key}.npz"
        if cache_file.exists():
            with np.load(cache_file) as z:
                keep = z["keep"]
                stats = json.loads(str(z["stats"]))
                return ImageSet(z["images"], tuple(s for s, k in zip(manifest.samples, keep) if k)), stats

    stats = {"kept": 0, "yaw": 0, "mouth": 0}
    out, keep = [], []
    for s in manifest.samples:
        img = np.asarray(Image.open(manifest.resolve(s)).convert("RGB"))
        if landmarks is not None:
            lm = landmarks[s.image_ref]
            res = frame_filter(lm, yaw_tol, mouth_tol)
            if not res.keep:
                stats[res.reason] += 1
                keep.append(False)
                continue
            crop_img = align_and_crop(img, lm, crop)
        else:
            h, w = img.shape[:2]
            box = {
                "left_eye": (w * 0.25, h / 2), "right_eye": (w * 0.75, h / 2), "nose_tip": (w / 2, h / 2),
                "mouth_left": (w * 0.4, h * 0.7), "mouth_right": (w * 0.6, h * 0.7),
                "mouth_top": (w / 2, h * 0.7), "mouth_bottom": (w / 2, h * 0.7),
                "crop_tl": (0, 0), "crop_tr": (w, 0), "crop_br": (w, h), "crop_bl": (0, h),
            }
            crop_img = align_and_crop(img, LandmarkSet(box), crop)
        out.append(np.round(crop_img * 255).astype(np.uint8))
        keep.append(True)
        stats["kept"] += 1
    if not out:
        raise ValueError("every frame was filtered out")
    images = np.stack(out)
    kept = tuple(s for s, k in zip(manifest.samples, keep) if k)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_file, images=images, keep=np.array(keep), stats=json.dumps(stats))
    log.info("prepared %d images (%s)", len(kept), stats)
    return ImageSet(images, kept), stats


def make_batch(
    images: np.ndarray,
    crop: CropConfig,
    aug=None,
    seeds: Sequence[int] | None = None,
):
    """uint8 crops -> normalized float tensor (n, 3, S, S), optionally augmented per sample."""
    out = np.empty((len(images), 3, images.shape[1], images.shape[2]), dtype=np.float32)
    mean = np.asarray(crop.channel_mean, dtype=np.float32)
    sd = np.asarray(crop.channel_sd, dtype=np.float32)
    for i, img in enumerate(images):
        x = img.astype(np.float32) / 255.0
        if aug is not None:
            x = augment(x, aug, seeds[i])
        out[i] = ((x - mean) / sd).transpose(2, 0, 1)
    return torch.from_numpy(out)
