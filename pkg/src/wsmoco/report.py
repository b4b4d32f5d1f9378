"""Writing EvalReports to disk and drawing the standard figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import VarianceMAE  # noqa: E402
from .crossval import ROW_FIELDS, EvalReport  # noqa: E402

FIG_FORMATS = ("png", "svg")


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (frozenset, set)):
        return sorted(x)
    return x


def _nan(x):
    return math.nan if x is None else x


def write_csv(rows: Sequence[dict], path: Path, fields: Sequence[str] | None = None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})


def save_report(report: EvalReport, out_dir: str | Path, name: str = "report") -> dict[str, Path]:
    """JSON with everything plus CSV tables for fold rows, aggregates and predictions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{name}.json",
        "folds": out / f"{name}_folds.csv",
        "summary": out / f"{name}_summary.csv",
        "predictions": out / f"{name}_predictions.csv",
    }
    agg = report.aggregate()
    blob = {"fingerprint": report.fingerprint, "config": report.config, "folds": report.folds,
            "rows": report.rows, "aggregate": agg}
    paths["json"].write_text(json.dumps(_json_safe(blob), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_csv(report.rows, paths["folds"], ROW_FIELDS)
    write_csv(agg, paths["summary"])
    write_csv(report.predictions, paths["predictions"])
    return paths


def load_report(path: str | Path) -> EvalReport:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = [{k: (_nan(v) if k in ROW_FIELDS[10:] else v) for k, v in r.items()} for r in blob["rows"]]
    return EvalReport(rows, blob["folds"], [], blob["config"])


def _save(fig, path: Path, formats=FIG_FORMATS) -> list[Path]:
    written = []
    for fmt in formats:
        p = path.with_suffix(f".{fmt}")
        # fixed salt: svg element ids are random otherwise
        with plt.rc_context({"svg.hashsalt": "wsmoco"}):
            fig.savefig(p, dpi=120, bbox_inches="tight", metadata={"Date": None} if fmt == "svg" else None)
        written.append(p)
    plt.close(fig)
    return written


def plot_curves(curves: Sequence[dict], path: str | Path, title: str = "") -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ep = [c["epoch"] for c in curves]
    ax.plot(ep, [c["train_loss"] for c in curves], label="train")
    ax.plot(ep, [c["val_loss"] for c in curves], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    return _save(fig, Path(path))


def plot_sweep(report: EvalReport, path: str | Path, metric: str = "accuracy", task: str = "classify", level: str = "frame") -> list[Path]:
    """Metric against number of training days, one line per method, standard-error bars."""
    agg = [a for a in report.aggregate() if a["task"] == task and a["level"] == level]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in dict.fromkeys(a["method"] for a in agg):
        pts = sorted((a["n_train_days"], a[f"{metric}_mean"], a[f"{metric}_se"]) for a in agg if a["method"] == method)
        x, y, e = zip(*pts)
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=method)
    ax.set_xlabel("training days")
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, Path(path))


def plot_trajectories(report: EvalReport, path: str | Path, method: str, level_days: bool = True) -> list[Path]:
    """Per patient: true PRE/POST weights and session-mean predictions, ordered by day."""
    preds = [p for p in report.predictions if p["method"] == method and p["task"] == "regress"
             and p["protocol"] == "leave_one_day_out"]
    patients = sorted({p["patient_id"] for p in preds})
    if not patients:
        raise ValueError(f"no regression predictions for method {method!r}")
    fig, axes = plt.subplots(len(patients), 1, figsize=(6, 2.2 * len(patients)), squeeze=False)
    for ax, pid in zip(axes[:, 0], patients):
        sess: dict[tuple, list] = {}
        for p in preds:
            if p["patient_id"] == pid:
                sess.setdefault((p["day_index"], p["session"]), [p["weight_kg"], []])[1].append(p["value"])
        order = sorted(sess, key=lambda k: (k[0], k[1] != "pre"))
        x = np.arange(len(order))
        ax.plot(x, [sess[k][0] for k in order], "o-", label="measured")
        ax.plot(x, [float(np.mean(sess[k][1])) for k in order], "s--", label="predicted")
        ax.set_xticks(x, [f"{d}{s[:2]}" for d, s in order], fontsize=6)
        ax.set_ylabel(f"{pid} kg")
    axes[0, 0].legend(fontsize=7)
    return _save(fig, Path(path))


def plot_variance_scatter(result: VarianceMAE, path: str | Path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.scatter([r["pre_variance"] for r in result.table], [r["mae"] for r in result.table])
    for r in result.table:
        ax.annotate(r["patient_id"], (r["pre_variance"], r["mae"]), fontsize=6)
    ax.set_xlabel("variance of pre-dialysis weight (kg²)")
    ax.set_ylabel("MAE (kg)")
    ax.set_title(f"r = {result.correlation:.3f}")
    return _save(fig, Path(path))


def comparison_table(report: EvalReport, level: str = "frame") -> list[dict]:
    """One row per method with mean ± sd of every metric (Table II layout)."""
    rows: dict[str, dict] = {}
    for a in report.aggregate():
        if a["level"] != level:
            continue
        row = rows.setdefault(a["method"], {"method": a["method"]})
        for metric in ("accuracy", "roc_auc", "pr_auc", "mae", "rmse", "corrcoef"):
            if f"{metric}_mean" in a:
                row[metric] = f"{a[f'{metric}_mean']:.3f} ± {a[f'{metric}_sd']:.3f}"
    return list(rows.values())


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(dict.fromkeys(k for r in rows for k in r))
    width = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    lines += ["  ".join(str(r.get(c, "")).ljust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines)
