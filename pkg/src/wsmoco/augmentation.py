"""Stochastic view generation: horizontal flip, color jitter, grayscale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import shift_hue
from ._util import stable_hash

AUG_KINDS = frozenset({"flip", "jitter", "gray"})
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# Appendix-style ablation arms: name -> enabled transforms
ABLATION_ARMS = {
    "none": frozenset(),
    "flip": frozenset({"flip"}),
    "gray": frozenset({"gray"}),
    "jitter": frozenset({"jitter"}),
    "all": AUG_KINDS,
}


@dataclass(frozen=True)
class AugConfig:
    p_flip: float = 0.5
    p_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    p_gray: float = 0.2
    enabled: frozenset[str] = AUG_KINDS

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        for name in ("p_flip", "p_jitter", "p_gray"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue must be <= 0.5")
        unknown = self.enabled - AUG_KINDS
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(enabled=frozenset())

    def with_arm(self, arm: str) -> "AugConfig":
        return AugConfig(
            self.p_flip, self.p_jitter, self.brightness, self.contrast, self.saturation, self.hue, self.p_gray,
            ABLATION_ARMS[arm],
        )


def grayscale(img: np.ndarray) -> np.ndarray:
    g = img @ LUMA
    return np.repeat(g[..., None], 3, axis=-1)


def _blend(a, b, f):
    return np.clip(f * a + (1.0 - f) * b, 0.0, 1.0).astype(np.float32)


def augment(image: np.ndarray, cfg: AugConfig, rng_seed: int) -> np.ndarray:
    """Apply flip, then color jitter (random sub-transform order), then grayscale.

    Random draws happen whether or not a transform is enabled, so arms that
    differ only in ``enabled`` see the same random stream.
    """
    img = np.array(image, dtype=np.float32, copy=True)
    rng = np.random.default_rng(rng_seed)

    do_flip = rng.random() < cfg.p_flip
    do_jitter = rng.random() < cfg.p_jitter
    order = rng.permutation(4)
    b = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    c = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
    s = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    do_gray = rng.random() < cfg.p_gray

    if do_flip and "flip" in cfg.enabled:
        img = img[:, ::-1].copy()
    if do_jitter and "jitter" in cfg.enabled:
        for op in order:
            if op == 0 and cfg.brightness > 0:
                img = np.clip(img * np.float32(b), 0.0, 1.0)
            elif op == 1 and cfg.contrast > 0:
                img = _blend(img, np.float32(grayscale(img)[..., 0].mean()), np.float32(c))
            elif op == 2 and cfg.saturation > 0:
                img = _blend(img, grayscale(img), np.float32(s))
            elif op == 3 and cfg.hue > 0:
                img = np.clip(shift_hue(img, h), 0.0, 1.0)
    if do_gray and "gray" in cfg.enabled:
        img = np.clip(grayscale(img), 0.0, 1.0)
    return img


def two_views(image: np.ndarray, cfg: AugConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations drawn from distinct child streams of ``seed``."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return augment(image, cfg, a.generate_state(1)[0]), augment(image, cfg, b.generate_state(1)[0])


def sample_seed(global_seed: int, sample_key, epoch: int) -> int:
    """Per-sample augmentation seed, independent of loading order."""
    ss = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, stable_hash(*sample_key) & 0xFFFFFFFF, int(epoch)])
    return int(ss.generate_state(1)[0])
