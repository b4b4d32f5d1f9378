"""Cross-patient analyses on top of an EvalReport."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .crossval import EvalReport
from .data_model import Sample, Session
from .metrics import pearson


@dataclass(frozen=True)
class VarianceMAE:
    correlation: float
    table: tuple[dict, ...]  # patient_id, pre_variance, mae


def pre_weight_variance(samples: Sequence[Sample]) -> dict[str, float]:
    """Population variance of each patient's PRE-session weights (one value per day)."""
    per: dict[str, dict[int, float]] = {}
    for s in samples:
        if s.session is Session.PRE:
            per.setdefault(s.patient_id, {})[s.day_index] = s.weight_kg
    return {pid: float(np.var(list(days.values()))) for pid, days in per.items()}


def variance_vs_mae(
    report: EvalReport, variances: Mapping[str, float], method: str, level: str = "frame", protocol: str = "leave_one_day_out",
) -> VarianceMAE:
    """Pearson correlation between PRE-weight variance and regression MAE across patients."""
    mae = report.per_patient("mae", protocol=protocol, method=method, task="regress", level=level)
    pids = [p for p in mae if p in variances and not math.isnan(mae[p])]
    if len(pids) < 3:
        raise ValueError(f"need regression results for at least 3 patients, got {len(pids)}")
    table = tuple(dict(patient_id=p, pre_variance=variances[p], mae=mae[p]) for p in pids)
    r = pearson([variances[p] for p in pids], [mae[p] for p in pids])
    return VarianceMAE(r, table)


@dataclass(frozen=True)
class PairedTest:
    metric: str
    method_a: str
    method_b: str
    n_pairs: int
    mean_diff: float
    t: float
    p_value: float


def paired_ttest(report: EvalReport, method_a: str, method_b: str, metric: str, task: str, level: str = "frame", **match) -> PairedTest:
    """Paired t-test over folds present (with finite values) for both methods."""
    def by_fold(method):
        return {
            (r["protocol"], r["fold"], r["n_train_days"], r["repeat"]): r[metric]
            for r in report.select(method=method, task=task, level=level, **match)
            if not math.isnan(r[metric])
        }

    a, b = by_fold(method_a), by_fold(method_b)
    keys = sorted(set(a) & set(b))
    if len(keys) < 2:
        raise ValueError("paired t-test needs at least two shared folds")
    x = np.array([a[k] for k in keys])
    y = np.array([b[k] for k in keys])
    diff = x - y
    if np.all(diff == diff[0]):
        # scipy warns and returns NaN for zero-variance differences
        t, p = (math.nan, math.nan) if diff[0] == 0 else (math.copysign(math.inf, diff[0]), 0.0)
    else:
        res = stats.ttest_rel(x, y)
        t, p = float(res.statistic), float(res.pvalue)
    return PairedTest(metric, method_a, method_b, len(keys), float(diff.mean()), t, p)
