"""Momentum-contrast pretraining: label-carrying FIFO queue, momentum encoder, training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .augmentation import AugConfig, sample_seed, two_views
from .dataset import ImageSet
from .losses import ContrastBatch, KernelConfig, LOSS_VARIANTS, LossOutput, NoPositivesError, compute_loss
from .network import EncoderConfig, HeadConfig, ModelBundle, build_bundle, clone_bundle
from .preprocessing import CropConfig

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "train_loss", "val_loss", "skipped_anchors")


# ---------------------------------------------------------------------------
# queue
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueueState:
    """FIFO dictionary of keys with their session labels and weights (kg).

    Rows are ordered oldest first; ``counters`` are insertion indices.
    """

    capacity: int
    z: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    counters: np.ndarray
    next_counter: int = 0

    @classmethod
    def empty(cls, capacity: int = 1024, dim: int = 128) -> "QueueState":
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        return cls(
            capacity,
            np.zeros((0, dim), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.float64),
            np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.counters)

    def tensors(self, dtype=torch.float32):
        return (
            torch.from_numpy(self.z).to(dtype),
            torch.from_numpy(self.labels),
            torch.from_numpy(self.weights).to(dtype),
        )


def enqueue_dequeue(q: QueueState, z, labels, weights, norm_tol: float = 1e-5) -> QueueState:
    """Append keys in order and evict the oldest entries beyond capacity."""
    z = np.asarray(z.detach().cpu() if isinstance(z, torch.Tensor) else z, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(z)
    if n > q.capacity:
        raise ValueError(f"key batch of {n} exceeds queue capacity {q.capacity}")
    if len(labels) != n or len(weights) != n:
        raise ValueError("keys, labels and weights differ in length")
    if n and np.abs(np.linalg.norm(z, axis=1) - 1).max() > norm_tol:
        raise ValueError("queue keys must be unit-norm")
    keep = max(0, len(q) + n - q.capacity)
    counters = np.arange(q.next_counter, q.next_counter + n, dtype=np.int64)
    return QueueState(
        q.capacity,
        np.concatenate([q.z[keep:], z]),
        np.concatenate([q.labels[keep:], labels]),
        np.concatenate([q.weights[keep:], weights]),
        np.concatenate([q.counters[keep:], counters]),
        q.next_counter + n,
    )


# ---------------------------------------------------------------------------
# momentum encoder
# ---------------------------------------------------------------------------


@dataclass
class MomentumPair:
    query: nn.Module
    key: nn.Module
    m: float = 0.9999

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        qs = [p.shape for p in self.query.parameters()]
        ks = [p.shape for p in self.key.parameters()]
        if qs != ks:
            raise ValueError("query and key parameter shapes differ")
        for p in self.key.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_query(cls, query: nn.Module, m: float = 0.9999) -> "MomentumPair":
        return cls(query, copy.deepcopy(query), m)


@torch.no_grad()
def momentum_update(pair: MomentumPair) -> MomentumPair:
    """theta_k <- m theta_k + (1 - m) theta_q; floating buffers (BN statistics) follow the same rule."""
    m = pair.m
    for pk, pq in zip(pair.key.parameters(), pair.query.parameters()):
        if pk.shape != pq.shape:
            raise ValueError("query and key parameter shapes differ")
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
    for bk, bq in zip(pair.key.buffers(), pair.query.buffers()):
        if bk.is_floating_point():
            bk.mul_(m).add_(bq, alpha=1.0 - m)
        else:
            bk.copy_(bq)
    return pair


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    loss: str = "weight_sup_moco"
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 5e-5
    tau: float = 0.1
    sigma: float = 3.0
    queue_size: int = 1024
    momentum: float = 0.9999
    val_fraction: float = 0.2
    seed: int = 17
    # "moco" uses the queue and momentum encoder; "simclr" contrasts the
    # two in-batch views.  "auto" picks simclr only for weight_sup_con.
    framework: str = "auto"
    proj_hidden: int = 512
    proj_dim: int = 128

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_VARIANTS)}")
        if self.framework not in ("auto", "moco", "simclr"):
            raise ValueError(f"unknown framework {self.framework!r}")
        for name in ("batch_size", "epochs", "lr", "tau", "sigma", "queue_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def resolved_framework(self) -> str:
        if self.framework != "auto":
            return self.framework
        return "simclr" if self.loss == "weight_sup_con" else "moco"

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.sigma, self.tau)


@dataclass
class StepMetrics:
    loss: float
    skipped_anchors: int
    contrast_size: int
    stepped: bool


def split_by_image(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random image-level split; both parts non-empty when n >= 2."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E11]))
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class Pretrainer:
    """Holds query/key models, queue and optimizer for one pretraining run."""

    def __init__(
        self,
        cfg: PretrainConfig,
        encoder_cfg: EncoderConfig,
        aug: AugConfig = AugConfig(),
        crop: CropConfig = CropConfig(),
        init: ModelBundle | None = None,
    ):
        self.cfg = cfg
        self.aug = aug
        self.crop = crop
        head = HeadConfig("projection", cfg.proj_hidden, cfg.proj_dim)
        self.bundle = build_bundle(encoder_cfg, head, cfg.seed)
        if init is not None:
            self.bundle.model.encoder.load_state_dict(init.model.encoder.state_dict())
        self.pair = MomentumPair.from_query(self.bundle.model, cfg.momentum)
        self.queue = QueueState.empty(cfg.queue_size, cfg.proj_dim)
        self.optimizer = torch.optim.Adam(self.bundle.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.framework = cfg.resolved_framework

    def _views(self, images: np.ndarray, samples: Sequence, epoch: int, seed: int):
        a, b = [], []
        mean = np.asarray(self.crop.channel_mean, dtype=np.float32)
        sd = np.asarray(self.crop.channel_sd, dtype=np.float32)
        for img, s in zip(images, samples):
            va, vb = two_views(img.astype(np.float32) / 255.0, self.aug, sample_seed(seed, s.key, epoch))
            a.append(((va - mean) / sd).transpose(2, 0, 1))
            b.append(((vb - mean) / sd).transpose(2, 0, 1))
        return torch.from_numpy(np.stack(a)), torch.from_numpy(np.stack(b))

    def _loss(self, xa, xb, labels, weights) -> tuple[LossOutput, torch.Tensor | None]:
        """Forward both views and evaluate the configured loss; returns keys for the queue."""
        k = self.cfg.kernel
        model = self.bundle.model
        if self.framework == "simclr":
            n = xa.shape[0]
            z = model(torch.cat([xa, xb]))
            lab = torch.cat([labels, labels])
            w = torch.cat([weights, weights])
            batch = ContrastBatch.from_views(z, lab, w)
            pos = (torch.arange(2 * n) + n) % (2 * n)
            return compute_loss(self.cfg.loss, batch, k, pos), None

        q = model(xa)
        with torch.no_grad():
            keys = self.pair.key(xb)
        qz, ql, qw = self.queue.tensors(q.dtype)
        if self.cfg.loss == "info_nce":
            # own key is the designated positive; other in-batch keys stay out of A(i)
            b = q.shape[0]
            contrast = torch.cat([keys, q, qz])
            mask = torch.zeros(b, contrast.shape[0], dtype=torch.bool)
            mask[:, :b] = ~torch.eye(b, dtype=torch.bool)
            mask[:, b : 2 * b] = torch.eye(b, dtype=torch.bool)
            batch = ContrastBatch(
                q, labels, weights, contrast, torch.cat([labels, labels, ql]), torch.cat([weights, weights, qw]), mask
            )
            return compute_loss("info_nce", batch, k, torch.arange(b)), keys
        batch = ContrastBatch.from_queries(q, labels, weights, qz, ql, qw)
        return compute_loss(self.cfg.loss, batch, k), keys

    def pretrain_step(self, images: np.ndarray, samples: Sequence, epoch: int = 0) -> StepMetrics:
        """One optimization step on a mini-batch; skipped (and counted) when no anchor has a positive."""
        self.bundle.model.train()
        self.pair.key.train()
        xa, xb = self._views(images, samples, epoch, self.cfg.seed)
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        weights = torch.tensor([s.weight_kg for s in samples], dtype=torch.float32)
        contrast_size = len(samples) - 1 + len(self.queue)
        try:
            out, keys = self._loss(xa, xb, labels, weights)
        except NoPositivesError:
            return StepMetrics(math.nan, len(samples), contrast_size, False)
        self.optimizer.zero_grad(set_to_none=True)
        out.loss.backward()
        self.optimizer.step()
        if self.framework == "moco":
            momentum_update(self.pair)
            self.queue = enqueue_dequeue(self.queue, keys, labels.numpy(), weights.double().numpy())
        return StepMetrics(float(out.loss.detach()), out.n_skipped, contrast_size, True)

    @torch.no_grad()
    def evaluate(self, data: ImageSet) -> float:
        """Mean loss on held-out images with fixed augmentation seeds; queue left untouched."""
        self.bundle.model.eval()
        self.pair.key.eval()
        total, count = 0.0, 0
        for start in range(0, len(data), self.cfg.batch_size):
            idx = np.arange(start, min(start + self.cfg.batch_size, len(data)))
            if len(idx) < 2:
                continue
            samples = [data.samples[i] for i in idx]
            xa, xb = self._views(data.images[idx], samples, 0, self.cfg.seed + 1)
            labels = torch.tensor([s.label for s in samples], dtype=torch.long)
            weights = torch.tensor([s.weight_kg for s in samples], dtype=torch.float32)
            try:
                out, _ = self._loss(xa, xb, labels, weights)
            except NoPositivesError:
                continue
            total += float(out.loss) * len(idx)
            count += len(idx)
        return total / count if count else math.nan


@dataclass
class PretrainResult:
    bundle: ModelBundle
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    split: tuple[list, list] = ((), ())


def pretrain(
    data: ImageSet,
    cfg: PretrainConfig,
    encoder_cfg: EncoderConfig,
    aug: AugConfig = AugConfig(),
    crop: CropConfig = CropConfig(),
    init: ModelBundle | None = None,
    progress=None,
) -> PretrainResult:
    """Run all epochs on ``data`` (the pretraining patients' images), 80/20 split by image.

    Returns the query encoder + projection head from the epoch with the lowest
    validation loss.
    """
    if len(data) < 4:
        raise ValueError("pretraining split is empty or too small")
    tr_idx, va_idx = split_by_image(len(data), cfg.val_fraction, cfg.seed)
    train, val = data.subset(tr_idx), data.subset(va_idx)
    trainer = Pretrainer(cfg, encoder_cfg, aug, crop, init)
    curves = []
    best = (math.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(len(train))
        losses, skipped = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            m = trainer.pretrain_step(train.images[idx], [train.samples[i] for i in idx], epoch)
            skipped += m.skipped_anchors
            if m.stepped:
                losses.append(m.loss)
        val_loss = trainer.evaluate(val)
        row = dict(epoch=epoch, train_loss=float(np.mean(losses)) if losses else math.nan, val_loss=val_loss, skipped_anchors=skipped)
        curves.append(row)
        log.info("pretrain epoch %d: train %.4f val %.4f skipped %d", epoch, row["train_loss"], val_loss, skipped)
        if progress is not None:
            progress(row)
        if val_loss < best[0] or best[2] is None:
            best = (val_loss, epoch, copy.deepcopy(trainer.bundle.model.state_dict()))
    bundle = clone_bundle(trainer.bundle, stage="pretrained")
    bundle.model.load_state_dict(best[2])
    return PretrainResult(bundle, curves, best[1], ([data.samples[i].key for i in tr_idx], [data.samples[i].key for i in va_idx]))


def write_curves(curves: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_HEADER, lineterminator="\n")
        w.writeheader()
        for row in curves:
            w.writerow({k: row[k] for k in CURVE_HEADER})
