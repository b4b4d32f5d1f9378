"""Cross-validation drivers and the report they produce.

Every driver builds its folds once and runs all compared methods on the
same folds, splits and seeds, so per-fold rows pair up across methods.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ._util import stable_hash
from .augmentation import AugConfig
from .dataset import ImageSet
from .downstream import FinetuneConfig, SingleClassError, finetune, predict
from .metrics import metrics_classify, metrics_regress
from .moco import split_by_image
from .network import EncoderConfig, ModelBundle
from .preprocessing import CropConfig

log = logging.getLogger(__name__)

PROTOCOLS = ("leave_one_day_out", "leave_one_patient_out", "training_days_sweep")
LEVELS = ("frame", "session")
METRICS = {"classify": ("accuracy", "roc_auc", "pr_auc"), "regress": ("mae", "rmse", "corrcoef")}
ROW_FIELDS = (
    "protocol", "method", "patient_id", "fold", "n_train_days", "repeat", "task", "level",
    "n_test", "status", "accuracy", "roc_auc", "pr_auc", "mae", "rmse", "corrcoef",
)


class LeakageError(AssertionError):
    pass


class TooFewError(ValueError):
    """Not enough days or patients for the requested protocol."""


@dataclass(frozen=True)
class Method:
    """One compared arm: a name and the encoder to start from (None = scratch)."""

    name: str
    base: ModelBundle | None = None


@dataclass(frozen=True)
class Fold:
    protocol: str
    fold: str
    patient_id: str
    train_keys: frozenset
    val_keys: frozenset
    test_keys: frozenset
    train_days: tuple[int, ...]
    n_train_days: int = 0
    repeat: int = 0

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol, "fold": self.fold, "patient_id": self.patient_id,
            "train_days": list(self.train_days), "n_train_days": self.n_train_days, "repeat": self.repeat,
            "n_train": len(self.train_keys), "n_val": len(self.val_keys), "n_test": len(self.test_keys),
        }


def audit_fold(fold: Fold) -> None:
    """Raise LeakageError unless test keys are disjoint from train and validation keys."""
    leaked = fold.test_keys & (fold.train_keys | fold.val_keys)
    if leaked:
        raise LeakageError(f"fold {fold.fold!r}: {len(leaked)} test keys also used for training, e.g. {sorted(leaked)[0]}")
    if fold.protocol == "leave_one_patient_out":
        test_patients = {k[0] for k in fold.test_keys}
        if test_patients & {k[0] for k in fold.train_keys | fold.val_keys}:
            raise LeakageError(f"fold {fold.fold!r}: held-out patient appears in training data")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    folds: list[dict] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return f"{stable_hash(json.dumps(self.config, sort_keys=True, default=str)):016x}"

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def per_patient(self, metric: str, **match) -> dict[str, float]:
        """Mean of ``metric`` over each patient's fold rows (NaN folds ignored)."""
        acc: dict[str, list[float]] = {}
        for r in self.select(**match):
            acc.setdefault(r["patient_id"], []).append(r[metric])
        out = {}
        for pid, vals in acc.items():
            finite = [v for v in vals if not math.isnan(v)]
            out[pid] = float(np.mean(finite)) if finite else math.nan
        return out

    def aggregate(self) -> list[dict]:
        """Mean and sd over patients of the per-patient fold means."""
        groups = dict.fromkeys(
            (r["protocol"], r["method"], r["task"], r["level"], r["n_train_days"]) for r in self.rows
        )
        out = []
        for protocol, method, task, level, n_days in groups:
            row = dict(protocol=protocol, method=method, task=task, level=level, n_train_days=n_days)
            match = dict(protocol=protocol, method=method, task=task, level=level, n_train_days=n_days)
            for metric in METRICS[task]:
                vals = [v for v in self.per_patient(metric, **match).values() if not math.isnan(v)]
                row[f"{metric}_mean"] = float(np.mean(vals)) if vals else math.nan
                row[f"{metric}_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else math.nan)
                row[f"{metric}_se"] = row[f"{metric}_sd"] / math.sqrt(len(vals)) if vals else math.nan
                row["n_patients"] = len(vals) if metric == METRICS[task][0] else row.get("n_patients")
            out.append(row)
        return out

    def mean_metric(self, metric: str, **match) -> float:
        vals = [v for v in self.per_patient(metric, **match).values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, self.folds + other.folds,
                          self.predictions + other.predictions, {**self.config, **other.config})


@dataclass(frozen=True)
class RunContext:
    """Everything a driver needs besides the data and the compared methods."""

    finetune: FinetuneConfig = FinetuneConfig()
    encoder_cfg: EncoderConfig | None = None
    aug: AugConfig = AugConfig()
    crop: CropConfig = CropConfig()
    seed: int = 17
    tasks: tuple[str, ...] = ("classify", "regress")

    def describe(self) -> dict:
        return {
            "finetune": self.finetune.__dict__, "encoder": None if self.encoder_cfg is None else self.encoder_cfg.__dict__,
            "aug": {**self.aug.__dict__, "enabled": sorted(self.aug.enabled)}, "crop": self.crop.__dict__,
            "seed": self.seed, "tasks": list(self.tasks),
        }


def _seed32(*parts) -> int:
    return stable_hash(*parts) & 0x7FFFFFFF


def _metric_rows(fold: Fold, method: str, task: str, preds, test: ImageSet) -> list[dict]:
    rows = []
    base = dict(protocol=fold.protocol, method=method, patient_id=fold.patient_id, fold=fold.fold,
                n_train_days=fold.n_train_days, repeat=fold.repeat, task=task)
    blank = {m: math.nan for ms in METRICS.values() for m in ms}
    frame_scores = preds.values
    by_session = preds.by_session()
    session_keys = list(by_session)
    levels = {
        "frame": (frame_scores, test.labels, test.weights),
        "session": (
            np.array([by_session[k] for k in session_keys]),
            np.array([k[2].label for k in session_keys]),
            np.array([next(s.weight_kg for s in test.samples if s.session_key == k) for k in session_keys]),
        ),
    }
    for level, (scores, labels, weights) in levels.items():
        row = dict(base, level=level, n_test=len(scores), **blank)
        if task == "classify":
            row.update(metrics_classify(scores, labels))
            row["status"] = "single_class" if len(set(labels.tolist())) < 2 else "ok"
        else:
            row.update(metrics_regress(scores, weights))
            row["status"] = "ok"
        rows.append(row)
    return rows


def _skipped_rows(fold: Fold, method: str, task: str, status: str) -> list[dict]:
    blank = {m: math.nan for ms in METRICS.values() for m in ms}
    return [dict(protocol=fold.protocol, method=method, patient_id=fold.patient_id, fold=fold.fold,
                 n_train_days=fold.n_train_days, repeat=fold.repeat, task=task, level=level,
                 n_test=len(fold.test_keys), status=status, **blank) for level in LEVELS]


def _run_fold(
    fold: Fold, train: ImageSet, val: ImageSet, test: ImageSet, methods: Sequence[Method],
    ctx: RunContext, report: EvalReport, multi_patient: bool = False,
) -> None:
    audit_fold(fold)
    report.folds.append(fold.to_json())
    ft_seed = _seed32("finetune", ctx.seed, fold.fold, fold.n_train_days, fold.repeat)
    for method in methods:
        for task in ctx.tasks:
            cfg = replace(ctx.finetune, task=task, seed=ft_seed,
                          init="scratch" if method.base is None else "pretrained")
            try:
                res = finetune(train, val, cfg, method.base, ctx.encoder_cfg, ctx.aug, ctx.crop,
                               multi_patient=multi_patient)
            except SingleClassError:
                log.warning("fold %s: single-class training data, %s/%s skipped", fold.fold, method.name, task)
                report.rows.extend(_skipped_rows(fold, method.name, task, "single_class_train"))
                continue
            preds = predict(res.bundle, test, res.scaler, ctx.crop)
            report.rows.extend(_metric_rows(fold, method.name, task, preds, test))
            for s, v in zip(preds.samples, preds.values):
                report.predictions.append(dict(
                    protocol=fold.protocol, method=method.name, fold=fold.fold, n_train_days=fold.n_train_days,
                    repeat=fold.repeat, task=task, patient_id=s.patient_id, day_index=s.day_index,
                    session=s.session.value, frame_index=s.frame_index, weight_kg=s.weight_kg, value=float(v),
                ))


def _split(pool: ImageSet, val_fraction: float, seed: int) -> tuple[ImageSet, ImageSet]:
    tr, va = split_by_image(len(pool), val_fraction, seed)
    return pool.subset(tr), pool.subset(va)


def _one_patient(data: ImageSet) -> str:
    pats = data.patients
    if len(pats) != 1:
        raise ValueError(f"expected one patient's data, got {pats}")
    return pats[0]


def _day_folds(data: ImageSet, min_days: int) -> tuple[str, list[int]]:
    pid = _one_patient(data)
    days = data.days()
    if len(days) < min_days:
        raise TooFewError(f"patient {pid} has {len(days)} days; need at least {min_days}")
    return pid, days


def leave_one_day_out(
    patient_data: ImageSet, methods: Sequence[Method], ctx: RunContext,
    test_days: Sequence[int] | None = None, progress: Callable[[str], None] | None = None,
) -> EvalReport:
    """One fold per day: test on that day, train/validate on an image-level split of the rest."""
    pid, days = _day_folds(patient_data, 3)
    report = EvalReport(config={"protocol": "leave_one_day_out", **ctx.describe()})
    for d in test_days if test_days is not None else days:
        test = patient_data.where(lambda s: s.day_index == d)
        pool = patient_data.where(lambda s: s.day_index != d)
        train, val = _split(pool, ctx.finetune.val_fraction, _seed32("split", ctx.seed, pid, d))
        fold = Fold("leave_one_day_out", f"{pid}/day{d}", pid, frozenset(train.keys), frozenset(val.keys),
                    frozenset(test.keys), tuple(pool.days()), len(pool.days()))
        _run_fold(fold, train, val, test, methods, ctx, report)
        if progress:
            progress(fold.fold)
    return report


def choose_days(available: Sequence[int], n: int, seed: int, patient_id: str, test_day: int, repeat: int) -> tuple[int, ...]:
    """Seeded day subset; depends only on its arguments so every method sees the same one."""
    available = sorted(available)
    if n > len(available):
        raise TooFewError(f"asked for {n} training days; only {len(available)} available")
    if n == len(available):
        return tuple(available)
    rng = np.random.default_rng(_seed32("days", seed, patient_id, test_day, n, repeat))
    return tuple(sorted(int(x) for x in rng.choice(available, size=n, replace=False)))


def training_days_sweep(
    patient_data: ImageSet, days_list: Sequence[int], repeats: int, methods: Sequence[Method], ctx: RunContext,
    test_days: Sequence[int] | None = None, progress: Callable[[str], None] | None = None,
) -> EvalReport:
    """Leave-one-day-out folds with the training pool cut to n randomly chosen days.

    With n equal to all remaining days the fold matches leave_one_day_out
    exactly (same days, same image split, same seeds).
    """
    pid, days = _day_folds(patient_data, 2)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if max(days_list) > len(days) - 1 or min(days_list) < 1:
        raise TooFewError(f"day counts {list(days_list)} outside 1..{len(days) - 1} for patient {pid}")
    report = EvalReport(config={"protocol": "training_days_sweep", "days_list": list(days_list),
                                "repeats": repeats, **ctx.describe()})
    for d in test_days if test_days is not None else days:
        test = patient_data.where(lambda s: s.day_index == d)
        rest = [x for x in days if x != d]
        for n in days_list:
            for r in range(repeats):
                chosen = set(choose_days(rest, n, ctx.seed, pid, d, r))
                pool = patient_data.where(lambda s: s.day_index in chosen)
                train, val = _split(pool, ctx.finetune.val_fraction, _seed32("split", ctx.seed, pid, d))
                fold = Fold("training_days_sweep", f"{pid}/day{d}", pid, frozenset(train.keys), frozenset(val.keys),
                            frozenset(test.keys), tuple(sorted(chosen)), n, r)
                _run_fold(fold, train, val, test, methods, ctx, report)
                if progress:
                    progress(f"{fold.fold} n={n} r={r}")
    return report


def leave_one_patient_out(
    data: ImageSet, methods: Sequence[Method], ctx: RunContext,
    test_patients: Sequence[str] | None = None, progress: Callable[[str], None] | None = None,
) -> EvalReport:
    """One fold per patient; a patient-common model trained on every other patient.

    Only classification is run: per-patient weight standardization has no
    meaning for an unseen patient.
    """
    patients = data.patients
    if len(patients) < 2:
        raise TooFewError("leave-one-patient-out needs at least two patients")
    ctx = replace(ctx, tasks=("classify",))
    report = EvalReport(config={"protocol": "leave_one_patient_out", **ctx.describe()})
    for pid in test_patients if test_patients is not None else patients:
        test = data.for_patients([pid])
        pool = data.where(lambda s: s.patient_id != pid)
        train, val = _split(pool, ctx.finetune.val_fraction, _seed32("split", ctx.seed, "lopo", pid))
        fold = Fold("leave_one_patient_out", pid, pid, frozenset(train.keys), frozenset(val.keys),
                    frozenset(test.keys), tuple(pool.days()), 0)
        _run_fold(fold, train, val, test, methods, ctx, report, multi_patient=True)
        if progress:
            progress(fold.fold)
    return report
