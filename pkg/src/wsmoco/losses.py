"""Contrastive losses over unit-norm embeddings.

Every loss here is a softmax over the contrast set of each anchor:

    log p_ik = z_i . z_k / tau - logsumexp_{j in A(i)} z_i . z_j / tau

and differs only in how the target distribution over k is formed:

* ``info_nce``          one designated positive per anchor
* ``sup_con``           uniform over same-label entries
* ``y_aware_info_nce``  RBF kernel on the continuous label, all entries eligible
* ``weight_sup_moco``   RBF kernel restricted to same-label entries
* ``weight_sup_con``    the same objective on an in-batch two-view (SimCLR) set

Anchors whose target distribution is empty are skipped and reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

LOSS_VARIANTS = ("info_nce", "sup_con", "y_aware", "weight_sup_con", "weight_sup_moco")
NORM_TOL = 1e-5


class NoPositivesError(ValueError):
    """Every anchor lacks a positive entry in its contrast set."""


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 3.0
    tau: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0 or not self.tau > 0:
            raise ValueError("sigma and tau must be strictly positive")


@dataclass
class ContrastBatch:
    """Anchors (B, D) against a contrast set (M, D).

    ``self_mask[i, k]`` is True where contrast entry k must be excluded from
    anchor i's set A(i) (the anchor itself when it also appears in the
    contrast set).  Labels are integer class ids, weights are in kg.
    """

    anchors: torch.Tensor
    anchor_labels: torch.Tensor
    anchor_weights: torch.Tensor
    contrast: torch.Tensor
    contrast_labels: torch.Tensor
    contrast_weights: torch.Tensor
    self_mask: torch.Tensor
    check_norm: bool = True

    def __post_init__(self):
        b, d = self.anchors.shape
        m, d2 = self.contrast.shape
        if d != d2:
            raise ValueError(f"embedding dims differ: {d} vs {d2}")
        if self.anchor_labels.shape != (b,) or self.anchor_weights.shape != (b,):
            raise ValueError("anchor labels/weights must have shape (B,)")
        if self.contrast_labels.shape != (m,) or self.contrast_weights.shape != (m,):
            raise ValueError("contrast labels/weights must have shape (M,)")
        if self.self_mask.shape != (b, m) or self.self_mask.dtype != torch.bool:
            raise ValueError("self_mask must be a (B, M) bool tensor")
        if bool(self.self_mask.all(dim=1).any()):
            raise ValueError("an anchor has an empty contrast set")
        if self.check_norm:
            with torch.no_grad():
                for name, z in (("anchors", self.anchors), ("contrast", self.contrast)):
                    err = (z.norm(dim=1) - 1).abs()
                    if err.numel() and float(err.max()) > NORM_TOL:
                        raise ValueError(f"{name} rows must be unit-norm within {NORM_TOL}")

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    @classmethod
    def from_queries(
        cls,
        queries: torch.Tensor,
        labels: torch.Tensor,
        weights: torch.Tensor,
        queue: torch.Tensor | None = None,
        queue_labels: torch.Tensor | None = None,
        queue_weights: torch.Tensor | None = None,
        check_norm: bool = True,
    ) -> "ContrastBatch":
        """Anchors are the queries; A(i) = other queries plus the queue."""
        b = queries.shape[0]
        parts = [queries]
        lab = [labels]
        wts = [weights]
        if queue is not None and queue.shape[0] > 0:
            parts.append(queue.to(queries.dtype))
            lab.append(queue_labels.to(labels.dtype))
            wts.append(queue_weights.to(weights.dtype))
        contrast = torch.cat(parts)
        mask = torch.zeros(b, contrast.shape[0], dtype=torch.bool)
        mask[:, :b] = torch.eye(b, dtype=torch.bool)
        return cls(queries, labels, weights, contrast, torch.cat(lab), torch.cat(wts), mask, check_norm)

    @classmethod
    def from_views(
        cls, z: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, check_norm: bool = True
    ) -> "ContrastBatch":
        """Every row is an anchor against all other rows (two-view in-batch set)."""
        n = z.shape[0]
        return cls(z, labels, weights, z, labels, weights, torch.eye(n, dtype=torch.bool), check_norm)


@dataclass
class LossOutput:
    loss: torch.Tensor
    per_anchor: torch.Tensor
    contributing: torch.Tensor

    @property
    def n_contributing(self) -> int:
        return int(self.contributing.sum())

    @property
    def n_skipped(self) -> int:
        return int((~self.contributing).sum())


def rbf_kernel(y_i, y_k, sigma: float):
    """exp(-(y_i - y_k)^2 / (2 sigma^2)); works on floats and tensors."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if isinstance(y_i, torch.Tensor) or isinstance(y_k, torch.Tensor):
        return torch.exp(-((y_i - y_k) ** 2) / (2.0 * sigma * sigma))
    return math.exp(-((y_i - y_k) ** 2) / (2.0 * sigma * sigma))


def contrast_log_prob(batch: ContrastBatch, tau: float) -> torch.Tensor:
    """Row-wise log-softmax of z_i . z_k / tau over A(i); -inf on excluded entries."""
    logits = batch.anchors @ batch.contrast.T / tau
    logits = logits.masked_fill(batch.self_mask, float("-inf"))
    row_max = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - row_max
    lse = torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    return shifted - lse


def weighted_contrastive(batch: ContrastBatch, coef: torch.Tensor, tau: float, require_positive: bool = True) -> LossOutput:
    """Mean over anchors of -sum_k c_ik log p_ik with c_ik = coef_ik / sum_j coef_ij.

    ``coef`` is the unnormalized (B, M) target weight; excluded entries are
    zeroed here.  Anchors with zero total weight are skipped.
    """
    coef = coef.masked_fill(batch.self_mask, 0.0)
    total = coef.sum(dim=1)
    contributing = total > 0
    if require_positive and not bool(contributing.any()):
        raise NoPositivesError("no anchor has a positive entry in its contrast set")
    c = coef / torch.where(contributing, total, torch.ones_like(total)).unsqueeze(1)
    log_p = contrast_log_prob(batch, tau)
    log_p = torch.where(batch.self_mask, torch.zeros_like(log_p), log_p)
    per_anchor = -(c * log_p).sum(dim=1)
    if bool(contributing.any()):
        loss = per_anchor[contributing].mean()
    else:
        loss = per_anchor.sum() * 0.0
    return LossOutput(loss, per_anchor, contributing)


def _same_label(batch: ContrastBatch) -> torch.Tensor:
    return (batch.anchor_labels.unsqueeze(1) == batch.contrast_labels.unsqueeze(0)).to(batch.anchors.dtype)


def _kernel(batch: ContrastBatch, sigma: float) -> torch.Tensor:
    return rbf_kernel(batch.anchor_weights.unsqueeze(1), batch.contrast_weights.unsqueeze(0), sigma).to(
        batch.anchors.dtype
    )


def info_nce(batch: ContrastBatch, positive_index: torch.Tensor, tau: float = 0.1) -> LossOutput:
    """Mean over anchors of -log softmax at the designated positive."""
    positive_index = torch.as_tensor(positive_index, dtype=torch.long)
    rows = torch.arange(batch.n_anchors)
    if bool(batch.self_mask[rows, positive_index].any()):
        raise ValueError("a positive index is excluded by the self mask")
    coef = torch.zeros(batch.self_mask.shape, dtype=batch.anchors.dtype)
    coef[rows, positive_index] = 1.0
    return weighted_contrastive(batch, coef, tau)


def sup_con(batch: ContrastBatch, tau: float = 0.1) -> LossOutput:
    """Uniform targets over same-label entries."""
    return weighted_contrastive(batch, _same_label(batch), tau)


def y_aware_info_nce(batch: ContrastBatch, k: KernelConfig = KernelConfig()) -> LossOutput:
    """Kernel-weighted targets over every entry of A(i), labels ignored."""
    return weighted_contrastive(batch, _kernel(batch, k.sigma), k.tau)


def weight_sup_moco(batch: ContrastBatch, k: KernelConfig = KernelConfig()) -> LossOutput:
    """Kernel-weighted targets over same-label entries.

    Different-label entries only appear in the softmax denominator and so
    are pushed away from the anchor.
    """
    return weighted_contrastive(batch, _kernel(batch, k.sigma) * _same_label(batch), k.tau)


def weight_sup_con(z_views: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, k: KernelConfig = KernelConfig()) -> LossOutput:
    """Kernel-weighted same-label objective over an in-batch set of views."""
    return weight_sup_moco(ContrastBatch.from_views(z_views, labels, weights), k)


def coefficients(batch: ContrastBatch, k: KernelConfig, variant: str = "weight_sup_moco") -> torch.Tensor:
    """Normalized target weights c_ik (rows of skipped anchors are zero)."""
    if variant in ("weight_sup_moco", "weight_sup_con"):
        coef = _kernel(batch, k.sigma) * _same_label(batch)
    elif variant == "y_aware":
        coef = _kernel(batch, k.sigma)
    elif variant == "sup_con":
        coef = _same_label(batch)
    else:
        raise ValueError(f"coefficients undefined for {variant!r}")
    coef = coef.masked_fill(batch.self_mask, 0.0)
    total = coef.sum(dim=1, keepdim=True)
    return coef / torch.where(total > 0, total, torch.ones_like(total))


def compute_loss(variant: str, batch: ContrastBatch, k: KernelConfig, positive_index=None) -> LossOutput:
    """Dispatch by variant name; ``weight_sup_con`` expects a view batch."""
    if variant == "info_nce":
        if positive_index is None:
            raise ValueError("info_nce needs positive indices")
        return info_nce(batch, positive_index, k.tau)
    if variant == "sup_con":
        return sup_con(batch, k.tau)
    if variant == "y_aware":
        return y_aware_info_nce(batch, k)
    if variant in ("weight_sup_moco", "weight_sup_con"):
        return weight_sup_moco(batch, k)
    raise ValueError(f"unknown loss variant {variant!r}; choose from {', '.join(LOSS_VARIANTS)}")
