"""Grad-CAM saliency maps for classification bundles."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .network import ModelBundle


def target_layer(bundle: ModelBundle) -> nn.Module:
    """Default Grad-CAM layer: the backbone's last convolutional block."""
    return bundle.model.encoder.backbone.target_layer


def grad_cam(
    bundle: ModelBundle, image: torch.Tensor, target_class: int = 1, layer: nn.Module | None = None,
) -> np.ndarray:
    """Saliency map (H, W) in [0, 1] for one normalized image (3, H, W) or (1, 3, H, W).

    Classification bundles use the logit of ``target_class``; a regression
    bundle uses its single scalar output and ignores ``target_class``.
    """
    kind = bundle.head_cfg.kind
    if kind == "projection":
        raise ValueError("Grad-CAM needs a task head; projection bundles have no class score")
    if kind == "classification" and target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    x = image.unsqueeze(0) if image.ndim == 3 else image
    if x.shape[0] != 1:
        raise ValueError("grad_cam takes a single image")
    layer = layer if layer is not None else target_layer(bundle)
    saved = {}

    def keep(_, __, out):
        out.retain_grad()
        saved["act"] = out

    handle = layer.register_forward_hook(keep)
    was_training = bundle.model.training
    bundle.model.eval()
    try:
        x = x.detach().clone()
        out = bundle.model(x)
        score = out[0, target_class] if kind == "classification" else out[0, 0]
        bundle.model.zero_grad(set_to_none=True)
        score.backward()
    finally:
        handle.remove()
        bundle.model.train(was_training)
    act = saved["act"].detach()
    grad = saved["act"].grad.detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.double().numpy()
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def mass_inside(cam: np.ndarray, mask: np.ndarray) -> float:
    """Share of total saliency falling inside ``mask`` (0 for an all-zero map)."""
    total = float(cam.sum())
    return float(cam[mask].sum()) / total if total > 0 else 0.0
