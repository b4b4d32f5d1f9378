import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsmoco.losses import (
    LOSS_VARIANTS,
    ContrastBatch,
    KernelConfig,
    NoPositivesError,
    coefficients,
    compute_loss,
    info_nce,
    rbf_kernel,
    sup_con,
    weight_sup_con,
    weight_sup_moco,
    y_aware_info_nce,
)
from wsmoco.oracle import oracle_loss

from conftest import random_query_batch, unit_rows

K = KernelConfig()


def _positive_index(batch, rng):
    allowed = [np.flatnonzero(~row) for row in batch.self_mask.numpy()]
    return torch.tensor([int(rng.choice(a)) for a in allowed])


def _views_batch(rng, n=None, d=4):
    n = n or int(rng.integers(2, 9))
    z = unit_rows(rng, 2 * n, d)
    lab = torch.from_numpy(np.tile(rng.integers(0, 2, n), 2))
    w = torch.from_numpy(np.tile(rng.normal(60, 3, n), 2))
    return ContrastBatch.from_views(z, lab, w)


@pytest.mark.parametrize("variant", LOSS_VARIANTS)
def test_matches_oracle(variant):
    rng = np.random.default_rng(hash(variant) % 2**32)
    for _ in range(25):
        batch = _views_batch(rng) if variant == "weight_sup_con" else random_query_batch(rng)
        pos = _positive_index(batch, rng) if variant == "info_nce" else None
        try:
            got = compute_loss(variant, batch, K, pos)
        except NoPositivesError:
            with pytest.raises(ValueError):
                oracle_loss(batch, K, variant, pos)
            continue
        want, flags = oracle_loss(batch, K, variant, pos)
        assert math.isclose(float(got.loss), want, rel_tol=1e-6)
        assert got.contributing.tolist() == flags


def test_rbf_kernel_values():
    assert rbf_kernel(60.0, 60.0, 3.0) == 1.0
    assert math.isclose(rbf_kernel(60.0, 63.0, 3.0), math.exp(-0.5))
    with pytest.raises(ValueError):
        rbf_kernel(1.0, 2.0, 0.0)


def test_reductions():
    rng = np.random.default_rng(3)
    for _ in range(20):
        b = random_query_batch(rng)
        ones = ContrastBatch(b.anchors, b.anchor_labels, torch.ones_like(b.anchor_weights), b.contrast,
                             b.contrast_labels, torch.ones_like(b.contrast_weights), b.self_mask)
        try:
            assert math.isclose(float(weight_sup_moco(ones, K).loss), float(sup_con(b, K.tau).loss), rel_tol=1e-9)
        except NoPositivesError:
            pass
        same = ContrastBatch(b.anchors, torch.zeros_like(b.anchor_labels), b.anchor_weights, b.contrast,
                             torch.zeros_like(b.contrast_labels), b.contrast_weights, b.self_mask)
        assert math.isclose(float(weight_sup_moco(same, K).loss), float(y_aware_info_nce(same, K).loss), rel_tol=1e-9)


def test_sup_con_single_positive_is_info_nce():
    z = unit_rows(np.random.default_rng(4), 6, 5)
    labels = torch.tensor([0, 1])
    contrast_labels = torch.tensor([5, 0, 2, 1, 3, 4])
    batch = ContrastBatch(z[:2], labels, torch.zeros(2, dtype=torch.float64), z, contrast_labels,
                          torch.zeros(6, dtype=torch.float64), torch.zeros(2, 6, dtype=torch.bool))
    pos = torch.tensor([1, 3])
    assert math.isclose(float(sup_con(batch, K.tau).loss), float(info_nce(batch, pos, K.tau).loss), rel_tol=1e-12)


def test_coefficients_rows_sum_to_one_or_zero():
    rng = np.random.default_rng(5)
    b = random_query_batch(rng, b=6, q=10)
    c = coefficients(b, K, "weight_sup_moco")
    sums = c.sum(1)
    assert torch.all(((sums - 1).abs() < 1e-12) | (sums == 0))
    assert torch.all(c[b.self_mask] == 0)


def test_anchor_without_positive_is_skipped():
    z = unit_rows(np.random.default_rng(6), 3, 4)
    labels = torch.tensor([0, 1, 1])
    w = torch.tensor([60.0, 61.0, 62.0], dtype=torch.float64)
    out = sup_con(ContrastBatch.from_queries(z, labels, w), 0.1)
    assert out.contributing.tolist() == [False, True, True]
    assert out.n_skipped == 1


def test_no_positives_anywhere_raises():
    z = unit_rows(np.random.default_rng(7), 2, 4)
    batch = ContrastBatch.from_queries(z, torch.tensor([0, 1]), torch.tensor([60.0, 61.0], dtype=torch.float64))
    with pytest.raises(NoPositivesError):
        weight_sup_moco(batch, K)


def test_rejects_non_unit_rows():
    z = torch.ones(2, 3, dtype=torch.float64)
    with pytest.raises(ValueError, match="unit-norm"):
        ContrastBatch.from_queries(z, torch.tensor([0, 0]), torch.tensor([1.0, 2.0]))


def test_rejects_empty_contrast_set():
    z = unit_rows(np.random.default_rng(8), 1, 3)
    with pytest.raises(ValueError, match="empty contrast set"):
        ContrastBatch.from_queries(z, torch.tensor([0]), torch.tensor([1.0], dtype=torch.float64))


def test_info_nce_rejects_masked_positive():
    b = random_query_batch(np.random.default_rng(9), b=3, q=2)
    with pytest.raises(ValueError):
        info_nce(b, torch.tensor([0, 0, 0]))


def test_stable_for_sharp_temperature():
    rng = np.random.default_rng(10)
    b = random_query_batch(rng, b=4, q=8)
    out = sup_con(b, tau=1e-3)
    assert torch.isfinite(out.loss)


@pytest.mark.parametrize("variant", ["sup_con", "y_aware", "weight_sup_moco", "info_nce"])
def test_gradients_match_finite_differences(variant):
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        b = random_query_batch(rng, b=4, q=6, d=3)
        pos = _positive_index(b, rng) if variant == "info_nce" else None
        anchors = b.anchors.clone().requires_grad_(True)

        def loss_at(a):
            bb = ContrastBatch(a, b.anchor_labels, b.anchor_weights, b.contrast, b.contrast_labels,
                               b.contrast_weights, b.self_mask, check_norm=False)
            return compute_loss(variant, bb, K, pos).loss

        try:
            loss_at(anchors).backward()
        except NoPositivesError:
            continue
        grad = anchors.grad
        h = 1e-4
        fd = torch.zeros_like(grad)
        base = b.anchors.detach()
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                e = torch.zeros_like(base)
                e[i, j] = h
                fd[i, j] = (loss_at(base + e) - loss_at(base - e)) / (2 * h)
        assert torch.allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_weight_sup_con_views_positive_pairs():
    rng = np.random.default_rng(11)
    n = 4
    z = unit_rows(rng, 2 * n, 5)
    lab = torch.tensor([0, 1, 0, 1] * 2)
    w = torch.tensor([60.0, 61.0, 62.0, 63.0] * 2, dtype=torch.float64)
    out = weight_sup_con(z, lab, w, K)
    assert out.n_contributing == 2 * n


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_loss_bounds(seed, tau):
    """Loss is at least the entropy of the target distribution and finite."""
    rng = np.random.default_rng(seed)
    b = random_query_batch(rng)
    try:
        out = weight_sup_moco(b, KernelConfig(3.0, tau))
    except NoPositivesError:
        return
    c = coefficients(b, K, "weight_sup_moco")
    ent = -(c * torch.log(torch.where(c > 0, c, torch.ones_like(c)))).sum(1)
    assert torch.all(out.per_anchor[out.contributing] >= ent[out.contributing] - 1e-9)
    assert math.isfinite(float(out.loss))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_invariant_to_weight_shift(seed, shift):
    rng = np.random.default_rng(seed)
    b = random_query_batch(rng)
    moved = ContrastBatch(b.anchors, b.anchor_labels, b.anchor_weights + shift, b.contrast, b.contrast_labels,
                          b.contrast_weights + shift, b.self_mask)
    try:
        a = float(y_aware_info_nce(b, K).loss)
    except NoPositivesError:
        return
    assert math.isclose(a, float(y_aware_info_nce(moved, K).loss), rel_tol=1e-9, abs_tol=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(12)
    for _ in range(10):
        b = random_query_batch(rng, b=5, q=12)
        perm = torch.from_numpy(rng.permutation(b.contrast.shape[0]))
        moved = ContrastBatch(b.anchors, b.anchor_labels, b.anchor_weights, b.contrast[perm], b.contrast_labels[perm],
                              b.contrast_weights[perm], b.self_mask[:, perm])
        for variant in ("sup_con", "y_aware", "weight_sup_moco"):
            try:
                a = float(compute_loss(variant, b, K).loss)
            except NoPositivesError:
                continue
            assert math.isclose(a, float(compute_loss(variant, moved, K).loss), rel_tol=1e-12)


def test_kernel_coefficient_monotone():
    """Moving one entry's weight further from the anchor's never raises its coefficient."""
    rng = np.random.default_rng(13)
    b = random_query_batch(rng, b=1, q=8)
    same = ContrastBatch(b.anchors, torch.zeros(1, dtype=torch.long), b.anchor_weights, b.contrast,
                         torch.zeros(b.contrast.shape[0], dtype=torch.long), b.contrast_weights, b.self_mask)
    prev = None
    for delta in np.linspace(0, 10, 21):
        w = same.contrast_weights.clone()
        w[0] = same.anchor_weights[0] + float(delta)
        moved = ContrastBatch(same.anchors, same.anchor_labels, same.anchor_weights, same.contrast,
                              same.contrast_labels, w, same.self_mask)
        c = float(coefficients(moved, K, "y_aware")[0, 0])
        if prev is not None:
            assert c <= prev + 1e-15
        prev = c
