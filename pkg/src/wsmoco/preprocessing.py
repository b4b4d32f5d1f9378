"""Landmark-driven face alignment, centre crop, frame filtering, channel normalization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import warp_bilinear

ROLES = (
    "left_eye",
    "right_eye",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "mouth_top",
    "mouth_bottom",
    "crop_tl",
    "crop_tr",
    "crop_br",
    "crop_bl",
)
CROP_ROLES = ("crop_tl", "crop_tr", "crop_br", "crop_bl")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_SD = (0.229, 0.224, 0.225)


class LandmarkError(ValueError):
    """Degenerate or out-of-bounds landmarks."""


@dataclass(frozen=True)
class LandmarkSet:
    points: dict[str, tuple[float, float]]

    def __post_init__(self):
        missing = [r for r in ROLES if r not in self.points]
        if missing:
            raise LandmarkError(f"missing landmark roles: {missing}")
        pts = {r: (float(self.points[r][0]), float(self.points[r][1])) for r in ROLES}
        for r, (x, y) in pts.items():
            if not (math.isfinite(x) and math.isfinite(y)):
                raise LandmarkError(f"non-finite landmark {r}")
        object.__setattr__(self, "points", pts)

    def __getitem__(self, role: str) -> np.ndarray:
        return np.array(self.points[role], dtype=np.float64)

    def check_bounds(self, width: int, height: int) -> None:
        for r, (x, y) in self.points.items():
            if not (0 <= x <= width and 0 <= y <= height):
                raise LandmarkError(f"landmark {r}=({x:.2f}, {y:.2f}) outside {width}x{height} image")

    def transformed(self, affine: np.ndarray) -> "LandmarkSet":
        """Apply a 2x3 affine map to every point."""
        a = np.asarray(affine, dtype=np.float64)
        return LandmarkSet({r: tuple(a[:, :2] @ np.array(p) + a[:, 2]) for r, p in self.points.items()})

    def to_json(self) -> dict[str, list[float]]:
        return {r: [round(x, 4), round(y, 4)] for r, (x, y) in self.points.items()}


@dataclass(frozen=True)
class CropConfig:
    output_size: int = 224
    interpolation: str = "bilinear"
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_sd: tuple[float, float, float] = IMAGENET_SD

    def __post_init__(self):
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")
        if self.interpolation != "bilinear":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        if len(self.channel_mean) != 3 or len(self.channel_sd) != 3:
            raise ValueError("channel statistics need three entries")
        if any(s <= 0 for s in self.channel_sd):
            raise ValueError("channel_sd entries must be positive")


def rotation_about(center, angle: float) -> np.ndarray:
    """2x3 affine rotating points by ``angle`` radians about ``center`` (pixel axes, y down)."""
    c, s = math.cos(angle), math.sin(angle)
    cx, cy = center
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


def crop_transform(lm: LandmarkSet, output_size: int) -> np.ndarray:
    """Output-to-input affine: aligned crop box scaled onto an output_size square."""
    le, re = lm["left_eye"], lm["right_eye"]
    d = re - le
    iod = math.hypot(*d)
    if iod < 1e-6:
        raise LandmarkError("coincident eye landmarks")
    angle = math.atan2(d[1], d[0])
    mid = (le + re) / 2
    derotate = rotation_about(mid, -angle)
    corners = np.array([derotate[:, :2] @ lm[r] + derotate[:, 2] for r in CROP_ROLES])
    x0, y0 = corners.min(axis=0)
    x1, y1 = corners.max(axis=0)
    bw, bh = x1 - x0, y1 - y0
    if bw < 1e-6 or bh < 1e-6:
        raise LandmarkError("crop region has zero area")
    scale = np.array([[bw / output_size, 0.0, x0], [0.0, bh / output_size, y0]])
    rerotate = rotation_about(mid, angle)
    # compose: out -> aligned frame -> original frame
    lin = rerotate[:, :2] @ scale[:, :2]
    off = rerotate[:, :2] @ scale[:, 2] + rerotate[:, 2]
    return np.hstack([lin, off[:, None]])


def align_and_crop(image: np.ndarray, lm: LandmarkSet, cfg: CropConfig = CropConfig()) -> np.ndarray:
    """Rotate the eye line horizontal, crop the boundary-point box, resize to a square.

    ``image`` is (H, W, 3) uint8 or float in [0, 1]; the result is float32 in
    [0, 1] with shape (output_size, output_size, 3).
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    lm.check_bounds(img.shape[1], img.shape[0])
    inv = crop_transform(lm, cfg.output_size)
    out = warp_bilinear(img, inv, cfg.output_size, cfg.output_size)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reason: str | None
    yaw_proxy: float
    mouth_proxy: float


def frame_filter(lm: LandmarkSet, yaw_tol: float = 0.15, mouth_tol: float = 0.25) -> FilterResult:
    """Discard frames turned left/right or with an open mouth.

    Both proxies are distances normalized by the inter-ocular distance, so
    the decision is invariant to translation and uniform scaling.  A frame
    is discarded only when a proxy strictly exceeds its tolerance.
    """
    le, re, nose = lm["left_eye"], lm["right_eye"], lm["nose_tip"]
    iod = float(np.linalg.norm(re - le))
    if iod == 0:
        raise LandmarkError("zero inter-ocular distance")
    yaw = abs(float(np.linalg.norm(le - nose)) - float(np.linalg.norm(re - nose))) / iod
    mouth = float(np.linalg.norm(lm["mouth_top"] - lm["mouth_bottom"])) / iod
    if yaw > yaw_tol:
        return FilterResult(False, "yaw", yaw, mouth)
    if mouth > mouth_tol:
        return FilterResult(False, "mouth", yaw, mouth)
    return FilterResult(True, None, yaw, mouth)


def normalize_channels(image: np.ndarray, cfg: CropConfig = CropConfig()) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> (3, H, W) float32 standardized per channel."""
    img = np.asarray(image, dtype=np.float32)
    mean = np.asarray(cfg.channel_mean, dtype=np.float32)
    sd = np.asarray(cfg.channel_sd, dtype=np.float32)
    return np.ascontiguousarray(((img - mean) / sd).transpose(2, 0, 1))


def denormalize_channels(tensor: np.ndarray, cfg: CropConfig = CropConfig()) -> np.ndarray:
    t = np.asarray(tensor, dtype=np.float32).transpose(1, 2, 0)
    return t * np.asarray(cfg.channel_sd, dtype=np.float32) + np.asarray(cfg.channel_mean, dtype=np.float32)


def load_landmarks(path: str | Path) -> dict[str, LandmarkSet]:
    """Read a landmark sidecar: ``{image_path: {role: [x, y], ...}, ...}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: LandmarkSet({r: tuple(v) for r, v in pts.items()}) for k, pts in raw.items()}


def save_landmarks(landmarks: dict[str, LandmarkSet], path: str | Path) -> None:
    data = {k: lm.to_json() for k, lm in landmarks.items()}
    Path(path).write_text(json.dumps(data, sort_keys=True, indent=0) + "\n", encoding="utf-8")
