import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from wsmoco.metrics import metrics_classify, metrics_regress, pearson, pr_auc, roc_auc


def naive_auc(scores, labels):
    """Probability a random positive outranks a random negative, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def naive_ap(scores, labels):
    """Average precision: mean over positives of precision at that positive's threshold."""
    n_pos = sum(labels)
    total = 0.0
    for s, y in zip(scores, labels):
        if y != 1:
            continue
        above = [(t, z) for t, z in zip(scores, labels) if t >= s]
        total += sum(z for _, z in above) / len(above)
    return total / n_pos


def random_set(rng):
    n = int(rng.integers(4, 60))
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    # coarse grid forces ties
    scores = rng.integers(0, 10, n) / 10 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


def test_auc_matches_references():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = random_set(rng)
        assert abs(roc_auc(s, y) - naive_auc(s, y)) <= 1e-9
        assert abs(roc_auc(s, y) - roc_auc_score(y, s)) <= 1e-9
        assert abs(pr_auc(s, y) - naive_ap(s, y)) <= 1e-9
        assert abs(pr_auc(s, y) - average_precision_score(y, s)) <= 1e-9


def test_accuracy_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s, y = random_set(rng)
        expected = 100.0 * sum((si >= 0.5) == yi for si, yi in zip(s, y)) / len(y)
        assert abs(metrics_classify(s, y)["accuracy"] - expected) <= 1e-9


def test_regression_matches_reference():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        p, t = rng.normal(60, 3, n), rng.normal(60, 3, n)
        m = metrics_regress(p, t)
        assert abs(m["mae"] - sum(abs(a - b) for a, b in zip(p, t)) / n) <= 1e-9
        assert abs(m["rmse"] - math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / n)) <= 1e-9
        assert abs(m["corrcoef"] - np.corrcoef(p, t)[0, 1]) <= 1e-9


def test_hand_cases():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    m = metrics_regress([2, 2, 5], [1, 2, 3])
    assert m["mae"] == 1.0
    assert m["rmse"] == math.sqrt(5 / 3)
    perfect = metrics_classify([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert perfect == {"accuracy": 100.0, "roc_auc": 1.0, "pr_auc": 1.0}
    assert roc_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    same = metrics_regress([1, 2, 3], [1, 2, 3])
    assert same["mae"] == 0 and same["rmse"] == 0 and same["corrcoef"] == pytest.approx(1.0)
    assert pearson([-1, 0, 1], [1, 0, -1]) == pytest.approx(-1.0)


def test_undefined_markers():
    m = metrics_classify([0.7, 0.2], [1, 1])
    assert m["accuracy"] == 50.0
    assert math.isnan(m["roc_auc"]) and math.isnan(m["pr_auc"])
    assert math.isnan(metrics_regress([2, 2], [1, 3])["corrcoef"])
    assert math.isnan(pearson([1.0], [2.0]))
    with pytest.raises(ValueError):
        metrics_classify([], [])
