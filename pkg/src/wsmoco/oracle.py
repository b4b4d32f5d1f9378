"""Scalar double-loop reference for the contrastive losses.

Written independently of ``losses``: plain Python floats, naive exponentials,
no masking tricks.  Only for small batches.
"""

from __future__ import annotations

import math

MAX_PAIRS = 4096


def _rows(t):
    return [[float(v) for v in row] for row in t.tolist()] if hasattr(t, "tolist") else [list(map(float, r)) for r in t]


def _flat(t):
    return [float(v) for v in (t.tolist() if hasattr(t, "tolist") else t)]


def oracle_loss(batch, k, variant: str, positive_index=None) -> tuple[float, list[bool]]:
    """Return (mean loss over contributing anchors, contributing flags).

    ``batch`` is a ContrastBatch (only its fields are read), ``k`` carries
    ``sigma`` and ``tau``.
    """
    anchors = _rows(batch.anchors.detach())
    contrast = _rows(batch.contrast.detach())
    a_lab = [int(v) for v in batch.anchor_labels.tolist()]
    c_lab = [int(v) for v in batch.contrast_labels.tolist()]
    a_w = _flat(batch.anchor_weights.detach())
    c_w = _flat(batch.contrast_weights.detach())
    excluded = [[bool(v) for v in row] for row in batch.self_mask.tolist()]
    if len(anchors) * len(contrast) > MAX_PAIRS:
        raise ValueError(f"oracle limited to {MAX_PAIRS} anchor-contrast pairs")
    if variant == "info_nce" and positive_index is None:
        raise ValueError("info_nce needs positive indices")

    tau, sigma = k.tau, k.sigma
    losses = []
    flags = []
    for i, zi in enumerate(anchors):
        members = [j for j in range(len(contrast)) if not excluded[i][j]]

        def sim(j):
            return sum(a * b for a, b in zip(zi, contrast[j])) / tau

        denom = 0.0
        for j in members:
            denom += math.exp(sim(j))

        weight = {}
        for j in members:
            w_rbf = math.exp(-((a_w[i] - c_w[j]) ** 2) / (2 * sigma**2))
            same = 1.0 if a_lab[i] == c_lab[j] else 0.0
            if variant == "info_nce":
                weight[j] = 1.0 if j == int(positive_index[i]) else 0.0
            elif variant == "sup_con":
                weight[j] = same
            elif variant == "y_aware":
                weight[j] = w_rbf
            elif variant in ("weight_sup_moco", "weight_sup_con"):
                weight[j] = w_rbf * same
            else:
                raise ValueError(f"unknown variant {variant!r}")
        total = sum(weight.values())
        if total == 0.0:
            flags.append(False)
            continue
        flags.append(True)
        li = 0.0
        for j in members:
            if weight[j] == 0.0:
                continue
            li -= weight[j] / total * math.log(math.exp(sim(j)) / denom)
        losses.append(li)
    if not losses:
        raise ValueError("no anchor has a positive")
    return sum(losses) / len(losses), flags
