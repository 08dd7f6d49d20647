"""Command-line surface: dataset generation, training, sampling, evaluation,
and the replacement / incremental augmentation experiments.

Every command resolves its configuration as defaults < --config JSON < flags,
writes the resolved config next to its outputs, and keeps artifacts
deterministic for a fixed seed (run.log included: no wall-clock content).
Failures exit nonzero with one machine-parseable line: `ERROR <category>: <msg>`.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from scipy import stats as sstats

from . import __version__
from . import autodiff as ad
from .codec import save_image
from .data import (
    Dataset,
    ToyGenConfig,
    gen_toy,
    load_jsonl,
    mix_add,
    mix_replace,
    save_jsonl,
)
from .diffusion import cosine_schedule, linear_schedule, schedule_from_spec, schedule_to_csv
from .guidance import GuidanceConfig, generate_dataset
from .metrics import (
    extract_features,
    fid,
    fit_stats,
    metrics_report_csv,
    overall_diversity,
    per_action_diversity,
    recognition_accuracy,
    write_metrics_report,
)
from .models import (
    ClassifierBundle,
    DenoiserBundle,
    DenoiserConfig,
    STTransConfig,
    TrainConfig,
    load_model,
    save_model,
    train_classifier,
    train_denoiser,
)
from . import plots

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad run configuration (flags or config file)."""


def _resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config-file values < explicitly passed flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path}: {e}") from e
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"config file {config_path}: unknown keys {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _semantic(cfg: dict) -> dict:
    # the output location is not semantic config; leaving it out keeps
    # artifacts bitwise comparable across reruns in different directories
    return {k: v for k, v in cfg.items() if k != "out"}


def _prepare_out_dir(cfg: dict, command: str) -> str:
    out_dir = cfg["out"]
    if not out_dir:
        raise ConfigError("--out directory is required")
    os.makedirs(out_dir, exist_ok=True)
    record = {"command": command, "version": __version__, "config": _semantic(cfg)}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir


def _run_logging(out_dir: str) -> logging.Handler:
    # no timestamps: run.log is part of the reproducibility contract
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("skeldiff").addHandler(handler)
    return handler


def _load_dataset(path: str) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_jsonl(path)


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in str(text).split(",") if part != ""]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from e


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part != ""]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e


def _build_schedule(cfg: dict):
    if cfg["schedule"] == "linear":
        return linear_schedule(cfg["steps"], cfg["beta_start"], cfg["beta_end"])
    if cfg["schedule"] == "cosine":
        return cosine_schedule(cfg["steps"], cfg["cosine_s"])
    raise ConfigError(f"unknown schedule {cfg['schedule']!r}")


# ---------------------------------------------------------------------------
# commands


GEN_TOY_DEFAULTS = {
    "out": None, "classes": 4, "per_class": 10, "joints": 16, "frames": 16,
    "noise_std": 0.02, "seed": 0,
}


def cmd_gen_toy(args) -> None:
    cfg = _resolve_config(args, GEN_TOY_DEFAULTS)
    out_dir = _prepare_out_dir(cfg, "gen-toy")
    ds = gen_toy(
        ToyGenConfig(
            num_classes=cfg["classes"],
            samples_per_class=cfg["per_class"],
            num_joints=cfg["joints"],
            seq_length=cfg["frames"],
            noise_std=cfg["noise_std"],
            seed=cfg["seed"],
        )
    )
    save_jsonl(ds, os.path.join(out_dir, "dataset.jsonl"))
    logger.info("gen-toy: %d items, %d classes, %d joints", len(ds), ds.num_classes, ds.num_joints)
    plots.plot_trajectories(
        [ds.by_class()[k][0] for k in range(ds.num_classes)],
        os.path.join(out_dir, "preview.png"),
        title="one sample per class (vertical coordinate)",
    )


TRAIN_DENOISER_DEFAULTS = {
    "out": None, "data": None, "schedule": "cosine", "steps": 200,
    "beta_start": 1e-4, "beta_end": 0.02, "cosine_s": 0.008,
    "iterations": 2000, "batch_size": 32, "lr": 1e-4, "weight_decay": 0.01,
    "seed": 0, "checkpoint_every": 0,
    "base_channels": 32, "res_blocks": 2, "time_embed_dim": 64, "levels": 3,
    "space_to_depth": 1,
}


def cmd_train_denoiser(args) -> None:
    cfg = _resolve_config(args, TRAIN_DENOISER_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("--data dataset path is required")
    out_dir = _prepare_out_dir(cfg, "train-denoiser")
    ds = _load_dataset(cfg["data"])
    sched = _build_schedule(cfg)
    top = 32 // cfg["space_to_depth"]
    resolutions = tuple(top // (2**i) for i in range(cfg["levels"]))
    model_cfg = DenoiserConfig(
        base_channels=cfg["base_channels"],
        res_blocks_per_resolution=cfg["res_blocks"],
        resolutions=resolutions,
        time_embed_dim=cfg["time_embed_dim"],
        space_to_depth=cfg["space_to_depth"],
    )
    train_cfg = TrainConfig(
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        iterations=cfg["iterations"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
    )
    bundle = train_denoiser(ds, sched, train_cfg, model_cfg, out_dir=out_dir)
    save_model(os.path.join(out_dir, "checkpoint.bin"), bundle)
    bundle.train_log.write_csv(os.path.join(out_dir, "loss_log.csv"))
    schedule_to_csv(sched, os.path.join(out_dir, "schedule.csv"))
    plots.plot_loss_curve(bundle.train_log.losses, os.path.join(out_dir, "loss_curve.png"),
                          title="denoiser training loss")
    plots.plot_schedule(sched, os.path.join(out_dir, "schedule.png"))
    logger.info("train-denoiser: final loss %.5f", bundle.train_log.losses[-1][1])


TRAIN_CLASSIFIER_DEFAULTS = {
    "out": None, "data": None, "eval_data": None,
    "iterations": 1500, "batch_size": 64, "lr": 3e-4, "weight_decay": 0.01, "seed": 0,
    "embed_dim": 64, "depth": 4, "heads": 4, "patch_size": 4, "mlp_ratio": 2,
}


def cmd_train_classifier(args) -> None:
    cfg = _resolve_config(args, TRAIN_CLASSIFIER_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("--data dataset path is required")
    out_dir = _prepare_out_dir(cfg, "train-classifier")
    ds = _load_dataset(cfg["data"])
    eval_ds = _load_dataset(cfg["eval_data"]) if cfg["eval_data"] else None
    model_cfg = STTransConfig(
        patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"], depth=cfg["depth"],
        heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"], num_classes=ds.num_classes,
    )
    train_cfg = TrainConfig(
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        iterations=cfg["iterations"], seed=cfg["seed"],
    )
    bundle = train_classifier(ds, train_cfg, model_cfg, eval_ds=eval_ds, out_dir=out_dir)
    save_model(os.path.join(out_dir, "checkpoint.bin"), bundle)
    bundle.train_log.write_csv(os.path.join(out_dir, "loss_log.csv"))
    with open(os.path.join(out_dir, "accuracy_log.csv"), "w", encoding="utf-8") as f:
        f.write("step,train_accuracy,eval_accuracy\n")
        for step, train_acc, eval_acc in bundle.train_log.accuracies:
            f.write(f"{step},{train_acc!r},{eval_acc!r}\n")
    plots.plot_loss_curve(bundle.train_log.losses, os.path.join(out_dir, "loss_curve.png"),
                          title="classifier training loss")
    final = bundle.train_log.accuracies[-1]
    logger.info("train-classifier: train_acc %.3f eval_acc %.3f", final[1], final[2])


SAMPLE_DEFAULTS = {
    "out": None, "denoiser": None, "classifier": None, "label": 0, "count": 8,
    "scale": 1.0, "steps": None, "sigma": "beta_tilde", "seed": 0,
    "sign": "corrected", "shift": "variance", "dump_images": False,
}


def _load_bundles(cfg: dict) -> tuple[DenoiserBundle, ClassifierBundle | None]:
    if not cfg["denoiser"]:
        raise ConfigError("--denoiser checkpoint is required")
    den = load_model(cfg["denoiser"])
    if not isinstance(den, DenoiserBundle):
        raise ConfigError(f"{cfg['denoiser']} is not a denoiser checkpoint")
    cls = None
    if cfg["classifier"]:
        cls = load_model(cfg["classifier"])
        if not isinstance(cls, ClassifierBundle):
            raise ConfigError(f"{cfg['classifier']} is not a classifier checkpoint")
    if cfg["scale"] > 0 and cls is None:
        raise ConfigError("--classifier checkpoint is required when --scale > 0")
    return den, cls


def _guidance_setup(cfg: dict, den: DenoiserBundle):
    sched = schedule_from_spec(den.schedule_spec)
    if cfg["steps"] is not None and cfg["steps"] != sched.num_steps:
        raise ConfigError(
            f"--steps {cfg['steps']} does not match the checkpoint's training schedule "
            f"({sched.num_steps}); retrain for a different step count"
        )
    gcfg = GuidanceConfig(
        scale=cfg["scale"], sigma_kind=cfg["sigma"], t_diff=sched.num_steps,
        seed=cfg["seed"], sign=cfg["sign"], shift=cfg["shift"],
    )
    return sched, gcfg


def _generate(cfg: dict, counts: list[int], out_dir: str) -> None:
    den, cls = _load_bundles(cfg)
    sched, gcfg = _guidance_setup(cfg, den)
    ds, images = generate_dataset(
        den.model, cls.model if cls else None, counts, gcfg, sched,
        norm=den.norm, content_size=den.num_joints, return_images=True,
    )
    save_jsonl(ds, os.path.join(out_dir, "dataset.jsonl"))
    if cfg["dump_images"]:
        img_dir = os.path.join(out_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for img, seq in zip(images, ds.items):
            save_image(img, os.path.join(img_dir, f"{seq.seq_id}.skelimg"))
    preview = images[: min(16, len(images))]
    plots.plot_image_grid(preview, os.path.join(out_dir, "samples.png"), title="generated skeleton images")
    plots.plot_trajectories(ds.items[: min(8, len(ds.items))], os.path.join(out_dir, "trajectories.png"))
    logger.info("generated %d sequences (scale=%s, sigma=%s)", len(ds), gcfg.scale, gcfg.sigma_kind)


def cmd_sample(args) -> None:
    cfg = _resolve_config(args, SAMPLE_DEFAULTS)
    out_dir = _prepare_out_dir(cfg, "sample")
    counts = [0] * cfg["label"] + [cfg["count"]]
    _generate(cfg, counts, out_dir)


GENERATE_DEFAULTS = dict(SAMPLE_DEFAULTS, counts="8,8,8,8")
GENERATE_DEFAULTS.pop("label")
GENERATE_DEFAULTS.pop("count")


def cmd_generate(args) -> None:
    cfg = _resolve_config(args, GENERATE_DEFAULTS)
    out_dir = _prepare_out_dir(cfg, "generate")
    counts = _parse_int_list(cfg["counts"])
    _generate(cfg, counts, out_dir)


EVALUATE_DEFAULTS = {
    "out": None, "real": None, "synth": None, "extractor": None,
    "n_pairs": 200, "seed": 0, "csv": False,
}


def cmd_evaluate(args) -> None:
    cfg = _resolve_config(args, EVALUATE_DEFAULTS)
    for key in ("real", "synth", "extractor"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    out_dir = _prepare_out_dir(cfg, "evaluate")
    real = _load_dataset(cfg["real"])
    synth = _load_dataset(cfg["synth"])
    extractor = load_model(cfg["extractor"])
    if not isinstance(extractor, ClassifierBundle):
        raise ConfigError(f"{cfg['extractor']} is not a classifier checkpoint")
    real_fs = extract_features(extractor, real)
    synth_fs = extract_features(extractor, synth)
    pad, _pad_mean = per_action_diversity(synth_fs, real_fs, cfg["n_pairs"], cfg["seed"])
    report = {
        "fid": fid(fit_stats(real_fs), fit_stats(synth_fs)),
        "accuracy": recognition_accuracy(extractor, synth),
        "overall_diversity": overall_diversity(synth_fs, real_fs, cfg["n_pairs"], cfg["seed"]),
        "per_action_diversity": pad.tolist(),
        "config": _semantic(cfg),
        "seeds": {"pairs": cfg["seed"]},
    }
    write_metrics_report(os.path.join(out_dir, "report.json"), report)
    if cfg["csv"]:
        metrics_report_csv(os.path.join(out_dir, "report.csv"), report)
    plots.plot_metrics_report(report, os.path.join(out_dir, "report.png"))
    logger.info("evaluate: fid %.5f accuracy %.3f", report["fid"], report["accuracy"])


AUGMENT_DEFAULTS = {
    "out": None, "mode": "add", "real": None, "synth": None, "eval_data": None,
    "proportions": "0,0.3,0.5", "trials": 5, "seed": 0,
    "rec_iterations": 800, "rec_batch_size": 32, "rec_lr": 3e-4,
    "rec_embed_dim": 48, "rec_depth": 3, "rec_heads": 4, "rec_patch_size": 4,
}


def run_augment_experiment(
    real: Dataset,
    synth: Dataset,
    eval_ds: Dataset,
    mode: str,
    proportions: list[float],
    trials: int,
    seed: int,
    rec_train: TrainConfig,
    rec_model: STTransConfig,
) -> dict:
    """Train a fresh recognizer per (proportion, trial) mixture and report
    mean eval accuracy with 95% Student-t confidence intervals."""
    if mode not in ("replace", "add"):
        raise ValueError(f"mode must be 'replace' or 'add', got {mode!r}")
    if trials < 1:
        raise ValueError("need at least 1 trial")
    mixer = mix_replace if mode == "replace" else mix_add
    cells = []
    for p in proportions:
        accuracies = []
        for trial in range(trials):
            trial_seed = seed + 1000 * trial
            mixed = mixer(real, synth, p, seed=trial_seed)
            cfg_t = TrainConfig(
                lr=rec_train.lr, weight_decay=rec_train.weight_decay,
                batch_size=rec_train.batch_size, iterations=rec_train.iterations,
                seed=trial_seed,
            )
            bundle = train_classifier(mixed, cfg_t, rec_model)
            accuracies.append(recognition_accuracy(bundle, eval_ds))
            logger.info("augment %s p=%.2f trial %d: accuracy %.4f", mode, p, trial, accuracies[-1])
        arr = np.asarray(accuracies)
        if trials > 1:
            half = float(sstats.t.ppf(0.975, trials - 1) * arr.std(ddof=1) / np.sqrt(trials))
        else:
            half = 0.0
        cells.append(
            {
                "proportion": p,
                "accuracies": arr.tolist(),
                "mean_accuracy": float(arr.mean()),
                "ci95_half": half,
            }
        )
    return {"mode": mode, "trials": trials, "seed": seed, "cells": cells}


def cmd_augment_experiment(args) -> None:
    cfg = _resolve_config(args, AUGMENT_DEFAULTS)
    for key in ("real", "synth", "eval_data"):
        if not cfg[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    out_dir = _prepare_out_dir(cfg, "augment-experiment")
    real = _load_dataset(cfg["real"])
    synth = _load_dataset(cfg["synth"])
    eval_ds = _load_dataset(cfg["eval_data"])
    proportions = _parse_float_list(cfg["proportions"])
    rec_train = TrainConfig(
        lr=cfg["rec_lr"], batch_size=cfg["rec_batch_size"],
        iterations=cfg["rec_iterations"], seed=cfg["seed"],
    )
    rec_model = STTransConfig(
        patch_size=cfg["rec_patch_size"], embed_dim=cfg["rec_embed_dim"],
        depth=cfg["rec_depth"], heads=cfg["rec_heads"], num_classes=real.num_classes,
    )
    report = run_augment_experiment(
        real, synth, eval_ds, cfg["mode"], proportions, cfg["trials"], cfg["seed"],
        rec_train, rec_model,
    )
    report["config"] = _semantic(cfg)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as f:
        f.write("proportion,trial,accuracy\n")
        for cell in report["cells"]:
            for trial, acc in enumerate(cell["accuracies"]):
                f.write(f"{cell['proportion']!r},{trial},{acc!r}\n")
        f.write("proportion,mean,ci95_half\n")
        for cell in report["cells"]:
            f.write(f"{cell['proportion']!r},{cell['mean_accuracy']!r},{cell['ci95_half']!r}\n")
    plots.plot_augmentation_trend(report["cells"], os.path.join(out_dir, "trend.png"), cfg["mode"])
    best = max((c for c in report["cells"] if c["proportion"] > 0),
               key=lambda c: c["mean_accuracy"], default=None)
    if best is not None:
        logger.info(
            "augment-experiment: baseline %.4f, best p=%.2f -> %.4f",
            report["cells"][0]["mean_accuracy"], best["proportion"], best["mean_accuracy"],
        )


# ---------------------------------------------------------------------------
# parser / entry point


def _add_common(sub, defaults):
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--config", help="JSON config file (flags override it)")
    for key, val in defaults.items():
        if key in ("out",):
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            sub.add_argument(flag, action="store_true", default=None)
        elif isinstance(val, int) and not isinstance(val, bool):
            sub.add_argument(flag, type=int, default=None)
        elif isinstance(val, float):
            sub.add_argument(flag, type=float, default=None)
        else:
            sub.add_argument(flag, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skeldiff",
        description="Transformer-guided diffusion for skeleton action sequences",
    )
    parser.add_argument("--version", action="version", version=f"skeldiff {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, fn, defaults in (
        ("gen-toy", cmd_gen_toy, GEN_TOY_DEFAULTS),
        ("train-denoiser", cmd_train_denoiser, TRAIN_DENOISER_DEFAULTS),
        ("train-classifier", cmd_train_classifier, TRAIN_CLASSIFIER_DEFAULTS),
        ("sample", cmd_sample, SAMPLE_DEFAULTS),
        ("generate", cmd_generate, GENERATE_DEFAULTS),
        ("evaluate", cmd_evaluate, EVALUATE_DEFAULTS),
        ("augment-experiment", cmd_augment_experiment, AUGMENT_DEFAULTS),
    ):
        sub = subs.add_parser(name)
        _add_common(sub, defaults)
        sub.set_defaults(func=fn, defaults=defaults)
    return parser


_ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (ad.NonFiniteError, "numeric"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "validation"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_logger = logging.getLogger("skeldiff")
    pkg_logger.setLevel(logging.INFO)
    pkg_logger.addHandler(console)
    file_handler = None
    try:
        # attach the file handler as soon as the output dir is known
        cfg_preview = _resolve_config(args, args.defaults)
        if cfg_preview.get("out"):
            os.makedirs(cfg_preview["out"], exist_ok=True)
            file_handler = _run_logging(cfg_preview["out"])
        args.func(args)
        return 0
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        for exc_type, category in _ERROR_CATEGORIES:
            if isinstance(e, exc_type):
                break
        else:
            category = "internal"
        print(f"ERROR {category}: {e}", file=sys.stderr)
        return 1
    finally:
        if file_handler is not None:
            pkg_logger.removeHandler(file_handler)
            file_handler.close()
        pkg_logger.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
