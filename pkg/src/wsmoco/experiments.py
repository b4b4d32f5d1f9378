"""End-to-end runs assembled from an ExperimentConfig.

Shared by the command line and the acceptance suite.  Every function writes
its artifacts under the directory it is given and returns in-memory results.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augmentation import ABLATION_ARMS, AugConfig
from .config import ExperimentConfig, write_resolved
from .crossval import (
    EvalReport,
    Method,
    RunContext,
    leave_one_day_out,
    leave_one_patient_out,
    training_days_sweep,
)
from .data_model import Manifest, load_manifest, split_cohort
from .dataset import ImageSet, make_batch, prepare_images
from .downstream import finetune, predict
from .moco import pretrain, write_curves
from .network import (
    BACKBONES,
    HeadConfig,
    ModelBundle,
    build_bundle,
    clone_bundle,
    load_checkpoint,
    load_external_weights,
    save_checkpoint,
)
from .report import comparison_table, format_table, plot_curves, plot_sweep, plot_trajectories, save_report, write_csv
from .saliency import grad_cam, mass_inside
from .synthetic import eye_nose_region, generate_cohort

log = logging.getLogger(__name__)


@dataclass
class Cohort:
    manifest: Manifest
    landmarks: Path | None
    data: ImageSet
    pretrain_patients: list[str]
    downstream_patients: list[str]
    filter_stats: dict


def load_cohort(cfg: ExperimentConfig, out_dir: Path) -> Cohort:
    """Read the configured manifest, or generate (and reuse) the synthetic cohort."""
    if cfg.cohort.manifest:
        manifest = load_manifest(cfg.cohort.manifest)
        lm = Path(cfg.cohort.landmarks) if cfg.cohort.landmarks else Path(cfg.cohort.manifest).parent / "landmarks.json"
        landmarks = lm if lm.exists() else None
    else:
        spec = cfg.synthetic.to_spec()
        cdir = out_dir / "cohort"
        meta = cdir / "cohort.json"
        if meta.exists() and json.loads(meta.read_text())["spec"] == json.loads(json.dumps(asdict(spec))):
            manifest = load_manifest(cdir / "manifest.csv")
        else:
            manifest = generate_cohort(spec, cdir)
        landmarks = cdir / "landmarks.json"
    cache = Path(cfg.cohort.cache_dir) if cfg.cohort.cache_dir else out_dir / "cache"
    data, stats = prepare_images(manifest, landmarks, cfg.preprocessing.crop(), cfg.preprocessing.yaw_tol,
                                 cfg.preprocessing.mouth_tol, cache)
    split = split_cohort(manifest, cfg.cohort.day_threshold)
    downstream = sorted(split.downstream_patients)
    if cfg.evaluation.patients:
        missing = set(cfg.evaluation.patients) - set(downstream)
        if missing:
            raise ValueError(f"evaluation.patients not in the downstream cohort: {sorted(missing)}")
        downstream = [p for p in downstream if p in set(cfg.evaluation.patients)]
    return Cohort(manifest, landmarks, data, sorted(split.pretrain_patients), downstream, stats)


def _external_bundle(cfg: ExperimentConfig, seed: int) -> ModelBundle:
    if not cfg.network.external_weights:
        raise ValueError("external init needs network.external_weights")
    head = HeadConfig("projection", cfg.network.proj_hidden, cfg.network.proj_dim)
    bundle = build_bundle(cfg.encoder(), head, seed)
    load_external_weights(bundle, cfg.network.external_weights)
    return clone_bundle(bundle, stage="pretrained")


def pretrain_encoder(
    cfg: ExperimentConfig, cohort: Cohort, seed: int, out_dir: Path, loss: str | None = None,
    aug: AugConfig | None = None, init: ModelBundle | None = None, tag: str | None = None,
) -> ModelBundle:
    """Pretrain on the pretraining patients; writes checkpoint and loss curves."""
    pcfg = cfg.pretrain.pretrain_cfg(seed, cfg.network)
    if loss is not None:
        pcfg = replace(pcfg, loss=loss)
    tag = tag or pcfg.loss
    data = cohort.data.for_patients(cohort.pretrain_patients)
    res = pretrain(data, pcfg, cfg.encoder(), aug or cfg.augmentation.aug(), cfg.preprocessing.crop(), init)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.bundle, out_dir / f"pretrain_{tag}.pt", {"loss": pcfg.loss, "best_epoch": res.best_epoch})
    write_curves(res.curves, out_dir / f"curves_{tag}.csv")
    if cfg.output.figures:
        plot_curves(res.curves, out_dir / f"curves_{tag}", title=tag)
    return res.bundle


def build_methods(
    cfg: ExperimentConfig, cohort: Cohort, seed: int, out_dir: Path, aug: AugConfig | None = None,
    losses: Sequence[str] | None = None,
) -> list[Method]:
    """One Method per configured init (and per compared loss for pretrained inits)."""
    losses = list(losses) if losses is not None else [cfg.pretrain.loss]
    methods = []
    for init in cfg.evaluation.inits:
        if init == "scratch":
            methods.append(Method("scratch"))
        elif init == "external":
            methods.append(Method("external", _external_bundle(cfg, seed)))
        elif init == "pretrained":
            if cfg.pretrain.checkpoint:
                bundle, extra = load_checkpoint(cfg.pretrain.checkpoint)
                methods.append(Method(str(extra.get("loss", "pretrained")), bundle))
                continue
            for loss in losses:
                methods.append(Method(loss, pretrain_encoder(cfg, cohort, seed, out_dir, loss, aug)))
        elif init == "external-then-pretrained":
            ext = _external_bundle(cfg, seed)
            for loss in losses:
                methods.append(Method(f"external+{loss}",
                                      pretrain_encoder(cfg, cohort, seed, out_dir, loss, aug, ext, f"external_{loss}")))
    return methods


def run_protocol(
    cfg: ExperimentConfig, cohort: Cohort, methods: Sequence[Method], seed: int,
    aug: AugConfig | None = None, protocol: str | None = None, progress: Callable[[str], None] | None = None,
) -> EvalReport:
    protocol = protocol or cfg.evaluation.cv
    ctx = RunContext(cfg.downstream.finetune_cfg(seed), cfg.encoder(), aug or cfg.augmentation.aug(),
                     cfg.preprocessing.crop(), seed, tuple(cfg.evaluation.tasks))
    if protocol == "leave_one_patient_out":
        if "classify" not in cfg.evaluation.tasks:
            raise ValueError("leave_one_patient_out evaluates classification; add it to evaluation.tasks")
        data = cohort.data.for_patients(cohort.downstream_patients)
        return leave_one_patient_out(data, methods, ctx, progress=progress)
    report = None
    for pid in cohort.downstream_patients:
        pdata = cohort.data.for_patients([pid])
        days = pdata.days()
        test_days = days[: cfg.evaluation.max_folds] if cfg.evaluation.max_folds else None
        if protocol == "leave_one_day_out":
            r = leave_one_day_out(pdata, methods, ctx, test_days, progress)
        else:
            counts = [int(n) for n in cfg.evaluation.days_sweep]
            r = training_days_sweep(pdata, counts, cfg.evaluation.repeats, methods, ctx, test_days, progress)
        report = r if report is None else report.merge(r)
    if report is None:
        raise ValueError("no downstream patients to evaluate")
    return report


def _write_outputs(cfg: ExperimentConfig, report: EvalReport, out_dir: Path, name: str = "report") -> None:
    save_report(report, out_dir, name)
    (out_dir / f"{name}_table.txt").write_text(format_table(comparison_table(report)) + "\n", encoding="utf-8")
    if not cfg.output.figures:
        return
    if report.config.get("protocol") == "training_days_sweep":
        plot_sweep(report, out_dir / f"{name}_sweep")
    regress_methods = {p["method"] for p in report.predictions if p["task"] == "regress"}
    for method in sorted(regress_methods):
        if report.config.get("protocol") == "leave_one_day_out":
            plot_trajectories(report, out_dir / f"{name}_trajectories_{method.replace('+', '_')}", method)


@dataclass
class SeedRun:
    seed: int
    report: EvalReport
    methods: list[str]


def crossval(
    cfg: ExperimentConfig, out_dir: Path, losses: Sequence[str] | None = None,
    protocols: Sequence[str] | None = None, progress: Callable[[str], None] | None = None,
) -> dict[str, list[SeedRun]]:
    """Pretrain (per seed) and run each protocol over the downstream patients.

    Methods are built once per seed and shared by every protocol.
    """
    write_resolved(cfg, out_dir)
    cohort = load_cohort(cfg, out_dir)
    protocols = list(protocols or [cfg.evaluation.cv])
    runs: dict[str, list[SeedRun]] = {p: [] for p in protocols}
    for seed in cfg.seeds:
        sdir = out_dir / f"seed{seed}"
        methods = build_methods(cfg, cohort, seed, sdir, losses=losses)
        for protocol in protocols:
            report = run_protocol(cfg, cohort, methods, seed, protocol=protocol, progress=progress)
            _write_outputs(cfg, report, sdir, protocol)
            runs[protocol].append(SeedRun(seed, report, [m.name for m in methods]))
    for protocol, seed_runs in runs.items():
        table = seed_summary(seed_runs)
        write_csv(table, out_dir / f"{protocol}_summary.csv")
        (out_dir / f"{protocol}_summary.txt").write_text(format_table(table) + "\n", encoding="utf-8")
    return runs


def seed_summary(runs: Sequence[SeedRun], level: str = "frame") -> list[dict]:
    """Per method: mean across seeds of the per-seed patient-mean metrics."""
    rows = []
    for method in dict.fromkeys(m for r in runs for m in r.methods):
        row = {"method": method}
        for metric, task in (("accuracy", "classify"), ("roc_auc", "classify"), ("pr_auc", "classify"),
                             ("mae", "regress"), ("rmse", "regress"), ("corrcoef", "regress")):
            vals = [r.report.mean_metric(metric, method=method, task=task, level=level) for r in runs]
            vals = [v for v in vals if v == v]
            if vals:
                row[metric] = round(float(np.mean(vals)), 6)
                row[f"{metric}_per_seed"] = " ".join(f"{v:.4f}" for v in vals)
        rows.append(row)
    return rows


def ablate_augmentation(
    cfg: ExperimentConfig, out_dir: Path, arms: Sequence[str] = tuple(ABLATION_ARMS),
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """Each arm's augmentation in both pretraining and fine-tuning, with shared seeds."""
    write_resolved(cfg, out_dir)
    cohort = load_cohort(cfg, out_dir)
    base_aug = cfg.augmentation.aug()
    rows = []
    for arm in arms:
        aug = base_aug.with_arm(arm)
        accs = []
        for seed in cfg.seeds:
            adir = out_dir / f"arm_{arm}" / f"seed{seed}"
            bundle = pretrain_encoder(cfg, cohort, seed, adir, aug=aug)
            ctx_cfg = replace(cfg, evaluation=replace(cfg.evaluation, tasks=["classify"]))
            report = run_protocol(ctx_cfg, cohort, [Method(arm, bundle)], seed, aug=aug, progress=progress)
            save_report(report, adir, "report")
            accs.append(report.mean_metric("accuracy", method=arm, task="classify", level="frame"))
        rows.append({"arm": arm, "enabled": "+".join(sorted(ABLATION_ARMS[arm])) or "none",
                     "accuracy": round(float(np.mean(accs)), 6),
                     "accuracy_per_seed": " ".join(f"{a:.4f}" for a in accs)})
    write_csv(rows, out_dir / "ablation.csv")
    (out_dir / "ablation.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    return rows


def compare_backbones(
    cfg: ExperimentConfig, out_dir: Path, backbones: Sequence[str], progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """Same data and seeds for every backbone; pretrained init with the configured loss."""
    unknown = [b for b in backbones if b not in BACKBONES]
    if unknown:
        raise ValueError(f"unknown backbones {unknown}; registered: {sorted(BACKBONES)}")
    write_resolved(cfg, out_dir)
    cohort = load_cohort(cfg, out_dir)
    rows = []
    for name in backbones:
        fixed = BACKBONES[name].fixed_dim
        bcfg = replace(cfg, network=replace(cfg.network, backbone=name, repr_dim=fixed or cfg.network.repr_dim))
        accs, maes = [], []
        for seed in cfg.seeds:
            bdir = out_dir / f"backbone_{name}" / f"seed{seed}"
            methods = build_methods(bcfg, cohort, seed, bdir)
            report = run_protocol(bcfg, cohort, methods, seed, progress=progress)
            save_report(report, bdir, "report")
            m = methods[-1].name
            accs.append(report.mean_metric("accuracy", method=m, task="classify", level="frame"))
            maes.append(report.mean_metric("mae", method=m, task="regress", level="frame"))
        rows.append({"backbone": name, "accuracy": round(float(np.nanmean(accs)), 6),
                     "mae": round(float(np.nanmean(maes)), 6) if not all(np.isnan(maes)) else float("nan")})
    write_csv(rows, out_dir / "backbones.csv")
    (out_dir / "backbones.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    return rows


def saliency(
    cfg: ExperimentConfig, out_dir: Path, bundle: ModelBundle | None = None, seed: int | None = None,
) -> list[dict]:
    """Grad-CAM on each downstream patient's last day, model fine-tuned on the other days.

    Records the share of saliency inside the eye/nose region next to that
    region's area share (the region is only meaningful for synthetic crops).
    """
    seed = cfg.seed if seed is None else seed
    write_resolved(cfg, out_dir)
    cohort = load_cohort(cfg, out_dir)
    if bundle is None:
        bundle = build_methods(replace(cfg, evaluation=replace(cfg.evaluation, inits=["pretrained"])),
                               cohort, seed, out_dir)[0].base
    crop = cfg.preprocessing.crop()
    region = eye_nose_region(crop.output_size)
    rows, maps = [], []
    for pid in cohort.downstream_patients:
        pdata = cohort.data.for_patients([pid])
        last = pdata.days()[-1]
        train = pdata.where(lambda s: s.day_index != last)
        test = pdata.where(lambda s: s.day_index == last)
        ft = cfg.downstream.finetune_cfg(seed, "classify")
        res = finetune(train, None, replace(ft, init="pretrained"), bundle, cfg.encoder(), cfg.augmentation.aug(), crop)
        preds = predict(res.bundle, test, None, crop)
        for i in range(min(cfg.evaluation.saliency_images, len(test))):
            x = make_batch(test.images[i : i + 1], crop)
            cam = grad_cam(res.bundle, x, int(preds.labels[i]))
            maps.append(cam)
            s = test.samples[i]
            rows.append(dict(patient_id=pid, day_index=s.day_index, session=s.session.value, frame_index=s.frame_index,
                             predicted=int(preds.labels[i]), mass_inside=mass_inside(cam, region),
                             region_fraction=float(region.mean())))
    write_csv(rows, out_dir / "saliency.csv")
    if maps:
        np.save(out_dir / "saliency_maps.npy", np.stack(maps).astype(np.float32))
    return rows
