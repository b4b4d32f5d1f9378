"""Command line entry point: ``wsmoco <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .augmentation import ABLATION_ARMS
from .config import OUTPUT_ROOT_ENV, PRESETS, ConfigError, ExperimentConfig, describe_keys, override_dict, resolve_config
from .crossval import PROTOCOLS
from .downstream import INITS, TASKS
from .losses import LOSS_VARIANTS
from .network import BACKBONES

log = logging.getLogger("wsmoco")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_day_counts(text: str) -> list[int]:
    """``"1..6"`` or ``"1,2,4"`` -> list of ints."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..6 or a list like 1,2,3; got {text!r}") from None


def _csv_list(choices):
    def parse(text: str) -> list[str]:
        items = [x.strip() for x in text.split(",") if x.strip()]
        bad = [x for x in items if x not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad or text!r}; choose from {', '.join(choices)}")
        return items
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named defaults applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default 17)")
    p.add_argument("--output", help=f"output directory (relative paths resolve under ${OUTPUT_ROOT_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    keys = "configuration keys (defaults; [paper] marks values taken from the method description):\n" + describe_keys()
    parser = argparse.ArgumentParser(prog="wsmoco", description="Weight-supervised momentum contrast toolkit.",
                                     epilog=keys, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help):
        p = sub.add_parser(name, help=help, description=help, epilog=keys, formatter_class=fmt)
        _common(p)
        return p

    p = add("pretrain", "contrastive pretraining on the multi-patient cohort")
    p.add_argument("--loss", choices=LOSS_VARIANTS, help="contrastive loss variant")

    p = add("finetune", "fine-tune one patient's model and predict a held-out day")
    p.add_argument("--patient", required=True, help="downstream patient id")
    p.add_argument("--task", choices=TASKS, default="classify")
    p.add_argument("--test-day", type=int, help="day held out for prediction (default: the last day)")
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint; omitted = train from scratch")

    p = add("crossval", "cross-validated comparison of initializations")
    p.add_argument("--cv", choices=PROTOCOLS, help="protocol")
    p.add_argument("--loss", choices=LOSS_VARIANTS, help="loss for the pretrained init")
    p.add_argument("--compare-losses", type=_csv_list(LOSS_VARIANTS), help="pretrain one arm per listed loss")
    p.add_argument("--inits", type=_csv_list(INITS), help="comma-separated initializations")
    p.add_argument("--days-sweep", type=parse_day_counts, help="training-day counts, e.g. 1..6 (selects the sweep)")
    p.add_argument("--repeats", type=int, help="day subsets per count")
    p.add_argument("--checkpoint", type=Path, help="reuse a pretrained checkpoint")

    p = add("ablate-aug", "augmentation ablation: every arm in both stages")
    p.add_argument("--arms", type=_csv_list(tuple(ABLATION_ARMS)), default=list(ABLATION_ARMS))

    p = add("backbones", "compare encoder backbones on the same data and seeds")
    p.add_argument("--backbones", type=_csv_list(tuple(BACKBONES)), default=["tiny-cnn", "resnet18"])

    add("gen-cohort", "write the synthetic cohort (images, landmarks, manifest)")

    p = add("saliency", "Grad-CAM maps for each downstream patient's last day")
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint; omitted = pretrain first")

    p = sub.add_parser("report", help="rebuild tables and figures from a saved report", formatter_class=fmt)
    p.add_argument("input", type=Path, help="report JSON written by crossval")
    p.add_argument("--output", help="directory for the rebuilt files (default: beside the input)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    layers = [override_dict(args.overrides)]
    flags: dict = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.output:
        flags.setdefault("output", {})["dir"] = args.output
    loss = getattr(args, "loss", None)
    if loss:
        flags.setdefault("pretrain", {})["loss"] = loss
    ckpt = getattr(args, "checkpoint", None)
    if ckpt and args.command in ("crossval", "saliency"):
        flags.setdefault("pretrain", {})["checkpoint"] = str(ckpt)
    ev = {}
    if getattr(args, "cv", None):
        ev["cv"] = args.cv
    if getattr(args, "inits", None):
        ev["inits"] = args.inits
    if getattr(args, "days_sweep", None):
        ev["days_sweep"] = args.days_sweep
        ev.setdefault("cv", "training_days_sweep")
    if getattr(args, "repeats", None) is not None:
        ev["repeats"] = args.repeats
    if ev:
        flags["evaluation"] = ev
    layers.append(flags)
    return resolve_config(args.config, args.preset, layers)


def _run(args) -> int:
    from . import experiments as ex
    from .config import write_resolved

    if args.command == "report":
        return _report(args)
    cfg = _config(args)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    progress = (lambda msg: log.info("%s", msg)) if args.verbose else None

    if args.command == "gen-cohort":
        write_resolved(cfg, out)
        cohort = ex.load_cohort(cfg, out)
        print(json.dumps({"cohort": str(out / "cohort"), **cohort.manifest.summary(), "filtered": cohort.filter_stats}))
    elif args.command == "pretrain":
        write_resolved(cfg, out)
        cohort = ex.load_cohort(cfg, out)
        for seed in cfg.seeds:
            ex.pretrain_encoder(cfg, cohort, seed, out / f"seed{seed}")
        print(f"checkpoints written under {out}")
    elif args.command == "finetune":
        _finetune(cfg, args, out)
    elif args.command == "crossval":
        losses = [cfg.pretrain.loss] + [x for x in (args.compare_losses or []) if x != cfg.pretrain.loss]
        runs = ex.crossval(cfg, out, losses=losses, progress=progress)
        for protocol in runs:
            print((out / f"{protocol}_summary.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "ablate-aug":
        ex.ablate_augmentation(cfg, out, args.arms, progress)
        print((out / "ablation.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "backbones":
        ex.compare_backbones(cfg, out, args.backbones, progress)
        print((out / "backbones.txt").read_text(encoding="utf-8"), end="")
    elif args.command == "saliency":
        rows = ex.saliency(cfg, out)
        inside = sum(r["mass_inside"] for r in rows) / max(len(rows), 1)
        print(f"{len(rows)} maps; mean saliency share in eye/nose region {inside:.3f} "
              f"(area share {rows[0]['region_fraction'] if rows else float('nan'):.3f})")
    return EXIT_OK


def _finetune(cfg: ExperimentConfig, args, out: Path) -> None:
    from . import experiments as ex
    from .config import write_resolved
    from .downstream import finetune, predict, write_predictions
    from .moco import split_by_image
    from .network import load_checkpoint, save_checkpoint

    write_resolved(cfg, out)
    cohort = ex.load_cohort(cfg, out)
    if args.patient not in cohort.downstream_patients:
        raise UsageError(f"unknown downstream patient {args.patient!r}; available: {', '.join(cohort.downstream_patients)}")
    pdata = cohort.data.for_patients([args.patient])
    day = args.test_day if args.test_day is not None else pdata.days()[-1]
    if day not in pdata.days():
        raise UsageError(f"patient {args.patient} has no day {day}")
    base = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    pool = pdata.where(lambda s: s.day_index != day)
    test = pdata.where(lambda s: s.day_index == day)
    tr, va = split_by_image(len(pool), cfg.downstream.val_fraction, cfg.seed)
    ft = cfg.downstream.finetune_cfg(cfg.seed, args.task)
    ft = replace(ft, init="pretrained" if base is not None else "scratch")
    res = finetune(pool.subset(tr), pool.subset(va), ft, base, cfg.encoder(), cfg.augmentation.aug(), cfg.preprocessing.crop())
    preds = predict(res.bundle, test, res.scaler, cfg.preprocessing.crop())
    extra = {"patient": args.patient, "test_day": day}
    if res.scaler is not None:
        extra["scaler"] = [res.scaler.mean_kg, res.scaler.sd_kg]
    save_checkpoint(res.bundle, out / f"finetuned_{args.patient}_{args.task}.pt", extra)
    write_predictions([preds], out / f"predictions_{args.patient}_{args.task}.csv")
    print(f"predictions for {len(test)} images written to {out}")


def _report(args) -> int:
    from .crossval import EvalReport
    from .report import comparison_table, format_table, load_report, plot_sweep, save_report

    report: EvalReport = load_report(args.input)
    out = Path(args.output) if args.output else args.input.parent
    name = args.input.stem + "_rebuilt"
    save_report(report, out, name)
    if report.config.get("protocol") == "training_days_sweep":
        plot_sweep(report, out / f"{name}_sweep")
    print(format_table(comparison_table(report)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, UsageError) as exc:
        print(f"wsmoco {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.debug("failure", exc_info=True)
        print(f"wsmoco {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
