"""Per-patient transfer: pre/post classification and weight regression heads."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augmentation import AugConfig, sample_seed
from .dataset import ImageSet, make_batch
from .network import (
    EncoderConfig,
    HeadConfig,
    ModelBundle,
    build_bundle,
    clone_bundle,
    set_trainable,
    trainable_parameters,
    with_task_head,
)
from .preprocessing import CropConfig

TASKS = ("classify", "regress")
INITS = ("scratch", "pretrained", "external", "external-then-pretrained")
PREDICTION_HEADER = ("patient_id", "day_index", "session", "frame_index", "task", "prediction", "score")


class DegenerateScalerError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


class MissingScalerError(ValueError):
    pass


@dataclass(frozen=True)
class WeightScaler:
    mean_kg: float
    sd_kg: float

    def __post_init__(self):
        if not self.sd_kg > 0:
            raise DegenerateScalerError("scaler sd must be positive")

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean_kg) / self.sd_kg

    def inverse(self, u):
        return np.asarray(u, dtype=np.float64) * self.sd_kg + self.mean_kg


def fit_scaler(train_weights: Sequence[float], allow_degenerate: bool = False) -> WeightScaler:
    """Mean/sd (population) of training weights; sd=1 fallback only when allowed."""
    w = np.asarray(train_weights, dtype=np.float64)
    if w.size == 0:
        raise DegenerateScalerError("no training weights")
    sd = float(w.std())
    if sd == 0 or len(np.unique(w)) < 2:
        if not allow_degenerate:
            raise DegenerateScalerError("training weights are constant; cannot standardize")
        sd = 1.0
    return WeightScaler(float(w.mean()), sd)


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "classify"
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 0.0
    # "auto" freezes all but the last block and head when the model is
    # initialized from pretrained weights and has <= freeze_max_days days.
    freeze: str = "auto"
    freeze_max_days: int = 2
    init: str = "scratch"
    augment: bool = True
    seed: int = 17
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}; choose from {INITS}")
        if self.freeze not in ("auto", "all", "last_block_and_head"):
            raise ValueError(f"unknown freezing policy {self.freeze!r}")
        if not (self.epochs > 0 and self.lr > 0 and self.batch_size > 0):
            raise ValueError("epochs, lr and batch_size must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class FinetuneResult:
    bundle: ModelBundle
    scaler: WeightScaler | None
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    policy: str = "all"


def resolve_policy(cfg: FinetuneConfig, base: ModelBundle | None, n_days: int) -> str:
    if cfg.freeze != "auto":
        return cfg.freeze
    if base is not None and base.stage != "scratch" and n_days <= cfg.freeze_max_days:
        return "last_block_and_head"
    return "all"


def _targets(data: ImageSet, task: str, scaler: WeightScaler | None) -> torch.Tensor:
    if task == "classify":
        return torch.from_numpy(data.labels)
    return torch.from_numpy(scaler.transform(data.weights).astype(np.float32))


def _task_loss(out: torch.Tensor, target: torch.Tensor, task: str) -> torch.Tensor:
    if task == "classify":
        return F.cross_entropy(out, target)
    return F.mse_loss(out.squeeze(1), target)


@torch.no_grad()
def _eval_loss(bundle: ModelBundle, data: ImageSet, target: torch.Tensor, task: str, crop: CropConfig) -> float:
    bundle.model.eval()
    total = 0.0
    for start in range(0, len(data), 128):
        sl = slice(start, start + 128)
        out = bundle.model(make_batch(data.images[sl], crop))
        total += float(_task_loss(out, target[sl], task)) * len(out)
    return total / len(data)


def finetune(
    train: ImageSet,
    val: ImageSet | None,
    cfg: FinetuneConfig,
    base: ModelBundle | None = None,
    encoder_cfg: EncoderConfig | None = None,
    aug: AugConfig = AugConfig(),
    crop: CropConfig = CropConfig(),
    allow_degenerate_scaler: bool = False,
    multi_patient: bool = False,
) -> FinetuneResult:
    """Attach a task head to ``base`` (or a fresh encoder) and train on one patient's data.

    The checkpoint with the lowest validation loss is returned; without
    validation data, the last epoch's weights are kept.  ``multi_patient``
    lifts the one-patient restriction for patient-common models.
    """
    patients = set(train.patients) | (set(val.patients) if val is not None else set())
    if len(patients) > 1 and not multi_patient:
        raise ValueError(f"finetune expects one patient, got {sorted(patients)}")
    if len(train) < 2:
        raise ValueError("need at least two training images")
    scaler = None
    if cfg.task == "classify":
        if len(set(train.labels.tolist())) < 2:
            raise SingleClassError("classification training data contains a single class")
    else:
        scaler = fit_scaler(train.weights, allow_degenerate_scaler)

    if base is None:
        if encoder_cfg is None:
            raise ValueError("encoder_cfg is required when training from scratch")
        bundle = build_bundle(encoder_cfg, HeadConfig.for_task(cfg.task), cfg.seed)
    else:
        bundle = with_task_head(base, cfg.task, cfg.seed)
    policy = resolve_policy(cfg, base, len(train.days()))
    set_trainable(bundle, policy)
    opt = torch.optim.Adam(trainable_parameters(bundle), lr=cfg.lr, weight_decay=cfg.weight_decay)

    y_train = _targets(train, cfg.task, scaler)
    y_val = _targets(val, cfg.task, scaler) if val is not None and len(val) else None
    augment = aug if cfg.augment else None
    curves = []
    best = (math.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        bundle.model.train()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0xF1]))
        order = rng.permutation(len(train))
        running = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            seeds = [sample_seed(cfg.seed, train.samples[i].key, epoch) for i in idx] if augment else None
            x = make_batch(train.images[idx], crop, augment, seeds)
            loss = _task_loss(bundle.model(x), y_train[idx], cfg.task)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
        val_loss = _eval_loss(bundle, val, y_val, cfg.task, crop) if y_val is not None else math.nan
        curves.append(dict(epoch=epoch, train_loss=float(np.mean(running)) if running else math.nan, val_loss=val_loss))
        if y_val is None:
            best = (math.nan, epoch, None)
        elif val_loss < best[0] or best[2] is None:
            best = (val_loss, epoch, copy.deepcopy(bundle.model.state_dict()))
    if best[2] is not None:
        bundle.model.load_state_dict(best[2])
    bundle = clone_bundle(bundle, stage="finetuned")
    return FinetuneResult(bundle, scaler, curves, best[1], policy)


@dataclass
class Predictions:
    """Frame-level outputs for one image set."""

    task: str
    samples: tuple
    values: np.ndarray  # POST probability (classify) or kg (regress)

    @property
    def labels(self) -> np.ndarray:
        return (self.values >= 0.5).astype(np.int64)

    def by_session(self) -> dict[tuple, float]:
        """Mean frame-level output per (patient, day, session)."""
        acc: dict[tuple, list[float]] = {}
        for s, v in zip(self.samples, self.values):
            acc.setdefault(s.session_key, []).append(float(v))
        return {k: float(np.mean(v)) for k, v in acc.items()}


@torch.no_grad()
def predict(bundle: ModelBundle, data: ImageSet, scaler: WeightScaler | None = None, crop: CropConfig = CropConfig()) -> Predictions:
    if bundle.stage != "finetuned":
        raise ValueError(f"predict needs a finetuned bundle, got stage {bundle.stage!r}")
    kind = bundle.head_cfg.kind
    if kind == "regression" and scaler is None:
        raise MissingScalerError("regression predictions need the training scaler")
    bundle.model.eval()
    outs = []
    for start in range(0, len(data), 128):
        outs.append(bundle.model(make_batch(data.images[start : start + 128], crop)))
    out = torch.cat(outs) if outs else torch.zeros((0, 2 if kind == "classification" else 1))
    if kind == "classification":
        values = torch.softmax(out.double(), dim=1)[:, 1].numpy()
        return Predictions("classify", data.samples, values)
    return Predictions("regress", data.samples, scaler.inverse(out.double().squeeze(1).numpy()))


def write_predictions(preds: Sequence[Predictions], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for p in preds:
            for s, v in zip(p.samples, p.values):
                if p.task == "classify":
                    w.writerow([s.patient_id, s.day_index, s.session.value, s.frame_index, p.task,
                                "post" if v >= 0.5 else "pre", repr(float(v))])
                else:
                    w.writerow([s.patient_id, s.day_index, s.session.value, s.frame_index, p.task, repr(float(v)), ""])
