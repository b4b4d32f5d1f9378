"""Experiment configuration: TOML sections, presets, overrides and the resolved dump.

Resolution order, later wins: built-in defaults, ``--preset``, the config
file, ``--set section.key=value`` flags, then dedicated CLI flags such as
``--loss`` or ``--seed``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .augmentation import AUG_KINDS, AugConfig
from .crossval import PROTOCOLS
from .downstream import INITS, TASKS, FinetuneConfig
from .losses import LOSS_VARIANTS
from .moco import PretrainConfig
from .network import BACKBONES, EncoderConfig
from .preprocessing import CropConfig
from .synthetic import CohortSpec

OUTPUT_ROOT_ENV = "WSMOCO_OUTPUT_ROOT"
RESOLVED_NAME = "resolved_config.toml"


class ConfigError(ValueError):
    pass


def _f(default, help: str, paper: bool = False):
    return field(default=default, metadata={"help": help, "paper": paper})


def _fl(default: list, help: str, paper: bool = False):
    return field(default_factory=lambda: list(default), metadata={"help": help, "paper": paper})


@dataclass
class CohortSection:
    manifest: str = _f("", "manifest CSV of a real cohort; empty generates the [synthetic] cohort")
    landmarks: str = _f("", "landmark JSON sidecar; empty means <manifest dir>/landmarks.json when present")
    cache_dir: str = _f("", "where prepared crops are cached; empty = <output dir>/cache")
    day_threshold: int = _f(7, "patients with fewer complete days go to pretraining", paper=True)


@dataclass
class SyntheticSection:
    n_patients: int = _f(39, "patients in the generated cohort", paper=True)
    days_min: int = _f(1, "fewest days per patient")
    days_max: int = _f(10, "most days per patient")
    patient_days: list = _fl([], "explicit day count per patient; overrides days_min/days_max")
    frames_per_session: int = _f(100, "frames rendered per session", paper=True)
    image_size: int = _f(64, "rendered image side in pixels")
    dry_weight_mean_kg: float = _f(57.7, "mean dry weight", paper=True)
    dry_weight_sd_kg: float = _f(11.5, "sd of dry weight across patients", paper=True)
    fluid_gain_mean_kg: float = _f(2.2, "mean between-session fluid gain", paper=True)
    fluid_gain_sd_kg: float = _f(0.6, "sd of per-patient mean gain")
    fluid_gain_day_sd_kg: float = _f(0.5, "day-to-day sd of the gain")
    residual_fluid_fraction: float = _f(0.05, "fraction of the gain left after dialysis")
    weight_walk_sd_max_kg: float = _f(0.6, "upper bound of per-patient dry-weight walk sd")
    walk_sd_kg: list = _fl([], "explicit dry-weight walk sd per patient; overrides the random draw")
    weight_walk_bound_kg: float = _f(3.0, "clip for the dry-weight walk")
    post_missing_prob: float = _f(0.13, "chance that a day has no POST session", paper=True)
    appearance_noise: float = _f(0.02, "per-pixel noise sd")
    lighting_sd: float = _f(0.08, "per-session lighting sd")
    puffiness_cap: float = _f(1.0, "upper bound of the swelling level")
    puffiness_scale_kg: float = _f(2.0, "fluid load at which swelling reaches 63% of the cap")
    frame_marks: int = _f(0, "random skin blotches per frame")
    expression_sd: float = _f(0.0, "per-frame expression jitter of eyes, lids, nose, cheeks")
    seed: int = _f(17, "cohort seed")

    def to_spec(self) -> CohortSpec:
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("days_min", "days_max", "patient_days", "walk_sd_kg")}
        return CohortSpec(days_per_patient=(self.days_min, self.days_max), patient_days=tuple(self.patient_days),
                          walk_sd_kg=tuple(self.walk_sd_kg), **kw)


@dataclass
class PreprocessingSection:
    output_size: int = _f(224, "aligned crop side in pixels", paper=True)
    yaw_tol: float = _f(0.15, "discard frames whose yaw proxy exceeds this")
    mouth_tol: float = _f(0.25, "discard frames whose mouth-opening proxy exceeds this")

    def crop(self) -> CropConfig:
        return CropConfig(output_size=self.output_size)


@dataclass
class AugmentationSection:
    enabled: list = _fl(sorted(AUG_KINDS), "transforms in use (flip, gray, jitter)", paper=True)
    p_flip: float = _f(0.5, "horizontal flip probability", paper=True)
    p_jitter: float = _f(0.8, "color jitter probability", paper=True)
    brightness: float = _f(0.4, "brightness jitter strength", paper=True)
    contrast: float = _f(0.4, "contrast jitter strength", paper=True)
    saturation: float = _f(0.4, "saturation jitter strength", paper=True)
    hue: float = _f(0.1, "hue jitter strength", paper=True)
    p_gray: float = _f(0.2, "grayscale probability", paper=True)

    def aug(self) -> AugConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw["enabled"] = frozenset(self.enabled)
        return AugConfig(**kw)


@dataclass
class NetworkSection:
    backbone: str = _f("resnet18", f"encoder backbone ({', '.join(sorted(BACKBONES))})", paper=True)
    repr_dim: int = _f(512, "representation size", paper=True)
    proj_hidden: int = _f(512, "projection head hidden width", paper=True)
    proj_dim: int = _f(128, "projection output size", paper=True)
    external_weights: str = _f("", "state-dict file used by the external inits")

    def encoder(self, input_size: int) -> EncoderConfig:
        return EncoderConfig(self.backbone, self.repr_dim, input_size)


@dataclass
class PretrainSection:
    loss: str = _f("weight_sup_moco", f"contrastive loss ({', '.join(LOSS_VARIANTS)})", paper=True)
    batch_size: int = _f(16, "mini-batch size", paper=True)
    epochs: int = _f(100, "pretraining epochs", paper=True)
    lr: float = _f(1e-4, "Adam learning rate", paper=True)
    weight_decay: float = _f(5e-5, "Adam weight decay", paper=True)
    tau: float = _f(0.1, "softmax temperature", paper=True)
    sigma: float = _f(3.0, "RBF kernel width on weight (kg)", paper=True)
    queue_size: int = _f(1024, "queue capacity K", paper=True)
    momentum: float = _f(0.9999, "key-encoder momentum m", paper=True)
    val_fraction: float = _f(0.2, "held-out image fraction for model selection", paper=True)
    framework: str = _f("auto", "moco, simclr or auto (simclr for weight_sup_con only)")
    checkpoint: str = _f("", "existing pretrained checkpoint; empty = pretrain within the run")

    def pretrain_cfg(self, seed: int, network: NetworkSection) -> PretrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "checkpoint"}
        return PretrainConfig(seed=seed, proj_hidden=network.proj_hidden, proj_dim=network.proj_dim, **kw)


@dataclass
class DownstreamSection:
    epochs: int = _f(20, "fine-tuning epochs", paper=True)
    lr: float = _f(1e-3, "Adam learning rate", paper=True)
    batch_size: int = _f(16, "mini-batch size", paper=True)
    weight_decay: float = _f(0.0, "Adam weight decay")
    freeze: str = _f("auto", "auto, all or last_block_and_head", paper=True)
    freeze_max_days: int = _f(2, "auto freezes when training days are at most this", paper=True)
    augment: bool = _f(True, "augment during fine-tuning", paper=True)
    val_fraction: float = _f(0.2, "validation image fraction per fold", paper=True)

    def finetune_cfg(self, seed: int, task: str = "classify") -> FinetuneConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        return FinetuneConfig(task=task, seed=seed, **kw)


@dataclass
class EvaluationSection:
    cv: str = _f("leave_one_day_out", f"protocol ({', '.join(PROTOCOLS)})", paper=True)
    inits: list = _fl(["scratch", "pretrained"], f"compared initializations ({', '.join(INITS)})", paper=True)
    tasks: list = _fl(list(TASKS), "downstream tasks", paper=True)
    days_sweep: list = _fl([1, 2, 3, 4, 5, 6], "training-day counts for training_days_sweep", paper=True)
    repeats: int = _f(5, "random day subsets per count", paper=True)
    seeds: list = _fl([], "run the evaluation once per seed; empty = the top-level seed")
    patients: list = _fl([], "restrict to these downstream patients; empty = all")
    max_folds: int = _f(0, "cap on test days per patient; 0 = every day")
    saliency_images: int = _f(8, "test images per patient for saliency")


@dataclass
class OutputSection:
    dir: str = _f("wsmoco-runs", f"output directory; relative paths resolve under ${OUTPUT_ROOT_ENV} when set")
    figures: bool = _f(True, "write PNG/SVG figures")


SECTIONS: dict[str, type] = {
    "cohort": CohortSection,
    "synthetic": SyntheticSection,
    "preprocessing": PreprocessingSection,
    "augmentation": AugmentationSection,
    "network": NetworkSection,
    "pretrain": PretrainSection,
    "downstream": DownstreamSection,
    "evaluation": EvaluationSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 17
    cohort: CohortSection = field(default_factory=CohortSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.evaluation.seeds] or [self.seed]

    def encoder(self) -> EncoderConfig:
        return self.network.encoder(self.preprocessing.output_size)

    def output_dir(self) -> Path:
        p = Path(self.output.dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not p.is_absolute() and root:
            p = Path(root) / p
        return p

    def validate(self) -> "ExperimentConfig":
        """Build every domain config once so bad values fail before any work starts."""
        try:
            self.synthetic.to_spec()
            crop = self.preprocessing.crop()
            self.augmentation.aug()
            self.encoder()
            self.pretrain.pretrain_cfg(self.seed, self.network)
            for task in self.evaluation.tasks:
                self.downstream.finetune_cfg(self.seed, task)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ev = self.evaluation
        if ev.cv not in PROTOCOLS:
            raise ConfigError(f"unknown cv protocol {ev.cv!r}; choose from {', '.join(PROTOCOLS)}")
        bad = [i for i in ev.inits if i not in INITS]
        if bad:
            raise ConfigError(f"unknown inits {bad}; choose from {', '.join(INITS)}")
        if not ev.inits:
            raise ConfigError("evaluation.inits is empty")
        if ev.repeats < 1 or any(int(n) < 1 for n in ev.days_sweep):
            raise ConfigError("repeats and day counts must be >= 1")
        for name in ("manifest", "landmarks"):
            path = getattr(self.cohort, name)
            if path and not Path(path).exists():
                raise ConfigError(f"cohort.{name} does not exist: {path}")
        for name, path in (("network.external_weights", self.network.external_weights),
                           ("pretrain.checkpoint", self.pretrain.checkpoint)):
            if path and not Path(path).exists():
                raise ConfigError(f"{name} does not exist: {path}")
        del crop
        return self


# Desk-scale settings calibrated for a single CPU core (tiny backbone, 64 px,
# short schedules, a harder synthetic cohort).  Used by the acceptance suite.
DESK_PRESET: dict[str, dict[str, Any]] = {
    "synthetic": {
        "n_patients": 30,
        "patient_days": [3, 4, 5, 6] * 6 + [8] * 6,
        "frames_per_session": 8,
        "appearance_noise": 0.04,
        "puffiness_cap": 0.3,
        "frame_marks": 4,
        "expression_sd": 0.08,
        "post_missing_prob": 0.0,
        "walk_sd_kg": [0.3] * 24 + [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    },
    "preprocessing": {"output_size": 64},
    "network": {"backbone": "tiny-cnn", "repr_dim": 64},
    "pretrain": {"epochs": 15, "lr": 1e-3, "momentum": 0.99},
    "downstream": {"epochs": 10},
}
PRESETS = {"paper": {}, "desk": DESK_PRESET}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return value
    return value


def from_dict(d: dict) -> ExperimentConfig:
    merged = _merge(ExperimentConfig().to_dict(), d)
    kw: dict[str, Any] = {"seed": _coerce(merged["seed"], 17, "seed")}
    for name, cls in SECTIONS.items():
        sec = {}
        for f in fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            sec[f.name] = _coerce(merged[name][f.name], default, f"{name}.{f.name}")
        kw[name] = cls(**sec)
    return ExperimentConfig(**kw)


def parse_value(text: str):
    """A TOML scalar or array; anything unparseable is taken as a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def override_dict(assignments: list[str]) -> dict:
    out: dict = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(text.strip())
    return out


def resolve_config(
    path: str | Path | None = None, preset: str | None = None, overrides: list[dict] | None = None,
) -> ExperimentConfig:
    """Apply preset, file and override layers over the defaults, then validate."""
    d = ExperimentConfig().to_dict()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        d = _merge(d, PRESETS[preset])
    if path is not None:
        try:
            d = _merge(d, tomli.loads(Path(path).read_text(encoding="utf-8")))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for layer in overrides or []:
        d = _merge(d, layer)
    return from_dict(d).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def describe_keys() -> str:
    """Every config key with its default; paper-sourced defaults are flagged."""
    lines = ["seed = 17  (run seed; also --seed)"]
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        for f in fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            tag = " [paper]" if f.metadata.get("paper") else ""
            lines.append(f"  {f.name} = {tomli_w.dumps({'v': default})[4:].strip()}{tag}  {f.metadata.get('help', '')}")
    return "\n".join(lines)
