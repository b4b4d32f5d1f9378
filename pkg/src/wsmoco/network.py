"""Encoder backbones, projection and task heads, freezing, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torchvision import models

CHECKPOINT_FORMAT = "wsmoco-checkpoint"
CHECKPOINT_VERSION = 1
NORM_EPS = 1e-12

BACKBONE_ALIASES = {"standard-18-layer-residual": "resnet18"}
STAGES = ("scratch", "pretrained", "finetuned")
POLICIES = ("all", "last_block_and_head")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "resnet18"
    repr_dim: int = 512
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "backbone", BACKBONE_ALIASES.get(self.backbone, self.backbone))
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; registered: {sorted(BACKBONES)}")
        if self.repr_dim <= 0 or self.input_size <= 0:
            raise ValueError("repr_dim and input_size must be positive")
        fixed = BACKBONES[self.backbone].fixed_dim
        if fixed is not None and fixed != self.repr_dim:
            raise ValueError(f"backbone {self.backbone} produces {fixed}-d representations, not {self.repr_dim}")

    @classmethod
    def tiny(cls, input_size: int = 64, repr_dim: int = 64) -> "EncoderConfig":
        return cls("tiny-cnn", repr_dim, input_size)


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "projection"
    hidden_dim: int = 512
    out_dim: int = 128

    def __post_init__(self):
        expected = {"classification": 2, "regression": 1}
        if self.kind not in ("projection", "classification", "regression"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind in expected and self.out_dim != expected[self.kind]:
            raise ValueError(f"{self.kind} head must have out_dim {expected[self.kind]}")
        if self.out_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("head dimensions must be positive")

    @classmethod
    def for_task(cls, task: str) -> "HeadConfig":
        return {"classify": cls("classification", 1, 2), "regress": cls("regression", 1, 1)}[task]


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------


class TinyCNN(nn.Module):
    """Four stride-2 conv-BN-ReLU blocks and global average pooling."""

    def __init__(self, repr_dim: int = 64, width: int = 16):
        super().__init__()
        chans = [3, width, width * 2, width * 4, repr_dim]
        self.blocks = nn.Sequential(
            *[
                nn.Sequential(
                    nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(chans[i + 1]),
                    nn.ReLU(inplace=True),
                )
                for i in range(4)
            ]
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    @property
    def last_block(self) -> nn.Module:
        return self.blocks[-1]

    @property
    def target_layer(self) -> nn.Module:
        return self.blocks[-1]

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class ResNetBackbone(nn.Module):
    def __init__(self, arch: str):
        super().__init__()
        net = getattr(models, arch)(weights=None)
        net.fc = nn.Identity()
        self.net = net

    @property
    def last_block(self) -> nn.Module:
        return self.net.layer4[-1]

    @property
    def target_layer(self) -> nn.Module:
        return self.net.layer4

    def forward(self, x):
        return self.net(x)


@dataclass(frozen=True)
class BackboneSpec:
    build: object
    fixed_dim: int | None


BACKBONES: dict[str, BackboneSpec] = {
    "tiny-cnn": BackboneSpec(lambda cfg: TinyCNN(cfg.repr_dim), None),
    "resnet18": BackboneSpec(lambda cfg: ResNetBackbone("resnet18"), 512),
    "resnet34": BackboneSpec(lambda cfg: ResNetBackbone("resnet34"), 512),
    "resnet50": BackboneSpec(lambda cfg: ResNetBackbone("resnet50"), 2048),
}


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = BACKBONES[cfg.backbone].build(cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (s, s):
            raise ShapeError(f"expected input (batch, 3, {s}, {s}), got {tuple(x.shape)}")
        return self.backbone(x)


def l2_normalize(u: torch.Tensor) -> torch.Tensor:
    return u / u.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int = 512, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, r):
        return l2_normalize(self.fc2(F.relu(self.fc1(r))))


def build_head(in_dim: int, cfg: HeadConfig) -> nn.Module:
    if cfg.kind == "projection":
        return ProjectionHead(in_dim, cfg.hidden_dim, cfg.out_dim)
    return nn.Linear(in_dim, cfg.out_dim)


class Model(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, head_cfg: HeadConfig):
        super().__init__()
        self.encoder = Encoder(enc_cfg)
        self.head = build_head(enc_cfg.repr_dim, head_cfg)
        self.head_cfg = head_cfg

    def forward(self, x):
        return self.head(self.encoder(x))


def fingerprint(enc: EncoderConfig, head: HeadConfig, seed: int) -> str:
    blob = json.dumps({"encoder": asdict(enc), "head": asdict(head), "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelBundle:
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    seed: int
    stage: str
    model: Model
    optimizer: str = "adam"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.encoder_cfg, self.head_cfg, self.seed)

    @property
    def encoder(self) -> Encoder:
        return self.model.encoder

    @property
    def head(self) -> nn.Module:
        return self.model.head


def build_bundle(enc: EncoderConfig, head: HeadConfig, seed: int, stage: str = "scratch") -> ModelBundle:
    """Construct a model with fan-in scaled init under a recorded seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Model(enc, head)
    return ModelBundle(enc, head, seed, stage, model)


def with_task_head(base: ModelBundle, task: str, seed: int) -> ModelBundle:
    """Discard the current head and attach a freshly initialized task head."""
    head_cfg = HeadConfig.for_task(task)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Model(base.encoder_cfg, head_cfg)
    model.encoder.load_state_dict(base.model.encoder.state_dict())
    stage = "scratch" if base.stage == "scratch" else "pretrained"
    return ModelBundle(base.encoder_cfg, head_cfg, seed, stage, model, base.optimizer)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def encode(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    return bundle.model.encoder(x)


def project(bundle: ModelBundle, r: torch.Tensor) -> torch.Tensor:
    if bundle.head_cfg.kind != "projection":
        raise ValueError("bundle has no projection head")
    return bundle.model.head(r)


def head_forward(bundle: ModelBundle, r: torch.Tensor) -> torch.Tensor:
    if bundle.head_cfg.kind == "projection":
        raise ValueError("projection heads are applied with project(), not head_forward()")
    return bundle.model.head(r)


def set_trainable(bundle: ModelBundle, policy: str) -> ModelBundle:
    """Flag parameter groups trainable.

    ``last_block_and_head`` leaves only the final backbone block and the head
    trainable.  Frozen BatchNorm layers keep updating running statistics in
    train mode; only their affine parameters are frozen.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown freezing policy {policy!r}; expected one of {POLICIES}")
    model = bundle.model
    if policy == "all":
        for p in model.parameters():
            p.requires_grad_(True)
        return bundle
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.encoder.backbone.last_block.parameters():
        p.requires_grad_(True)
    for p in model.head.parameters():
        p.requires_grad_(True)
    return bundle


def trainable_parameters(bundle: ModelBundle) -> list[nn.Parameter]:
    return [p for p in bundle.model.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_cfg": json.dumps(asdict(bundle.encoder_cfg)),
        "head_cfg": json.dumps(asdict(bundle.head_cfg)),
        "seed": bundle.seed,
        "stage": bundle.stage,
        "optimizer": bundle.optimizer,
        "fingerprint": bundle.fingerprint,
        "state_dict": bundle.model.state_dict(),
        "rng_state": torch.get_rng_state(),
        "extra": json.dumps(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    enc = EncoderConfig(**json.loads(payload["encoder_cfg"]))
    head = HeadConfig(**json.loads(payload["head_cfg"]))
    bundle = build_bundle(enc, head, payload["seed"], payload["stage"])
    bundle.optimizer = payload["optimizer"]
    if bundle.fingerprint != payload["fingerprint"]:
        raise ValueError("checkpoint fingerprint does not match its configs")
    bundle.model.load_state_dict(payload["state_dict"])
    extra = json.loads(payload["extra"])
    extra["rng_state"] = payload["rng_state"]
    return bundle, extra


def load_external_weights(bundle: ModelBundle, path: str | Path) -> list[str]:
    """Initialize the encoder from a third-party state dict (``.pt``/``.pth``).

    Accepts either a bare backbone state dict (e.g. a torchvision ResNet) or a
    dict with a ``state_dict`` entry.  Common prefixes (``module.``,
    ``encoder.``, ``backbone.``) are stripped and classifier weights are
    skipped.  Returns the encoder keys that were not found in the file.
    """
    raw = torch.load(Path(path), map_location="cpu", weights_only=True)
    if "state_dict" in raw and isinstance(raw["state_dict"], dict):
        raw = raw["state_dict"]
    target = bundle.model.encoder.backbone
    inner = target.net if isinstance(target, ResNetBackbone) else target
    cleaned = {}
    for k, v in raw.items():
        for prefix in ("module.", "encoder.", "backbone.", "net."):
            if k.startswith(prefix):
                k = k[len(prefix):]
        if k.startswith("fc."):
            continue
        cleaned[k] = v
    result = inner.load_state_dict(cleaned, strict=False)
    return list(result.missing_keys)


def clone_bundle(bundle: ModelBundle, **changes) -> ModelBundle:
    model = build_bundle(bundle.encoder_cfg, bundle.head_cfg, bundle.seed, bundle.stage).model
    model.load_state_dict(bundle.model.state_dict())
    return replace(bundle, model=model, **changes)
