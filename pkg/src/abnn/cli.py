"""Command-line entry point for reproducible runs.

One JSON config file drives every subcommand; the only flags are the
subcommand, --config, --checkpoint and --out, so a run is a pure function
of its config and input files. Exit codes: 0 success, 1 config/validation
error, 2 runtime error, 3 theory-check failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from . import evaluation, theory
from .datasets import BlobSpec, gen_blobs, load_bundle, save_bundle
from .model import AbnnModel, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import Rng, std_normal_cdf
from .training import MODES, TrainerConfig, accuracy, resolve_config, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_THEORY = 3

_EVAL_STREAM = 0x5EED


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "mode": "abnn",
    "out_dir": "runs/default",
    "data": {
        "K": 4,
        "d": 8,
        "sigma_id": 1.0,
        "semi_shift": 4.0,
        "margin": 10.0,
        "box": 20.0,
        "n_per_class": 500,
        "n_test_per_class": 100,
        "n_semi": 400,
        "n_full": 400,
        "noise_std": 1.0,
        "standardize": True,
    },
    "model": {"width": 32, "n_blocks": 3, "sigma_init": 1.0},
    "train": {
        "alpha": 0.95,
        "n_samples": 5,
        "lr": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 32,
        "epochs": 30,
        "kl_scale": None,
    },
    "eval": {"n_samples_eval": 5, "trim": 0.01, "n_bins": 20},
    "verify": {
        "n_mc": 1_000_000,
        "n_profiles": 10_000,
        "ascent_steps": 500,
        "merge_trials": 100,
        "negative_control": False,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _check_keys(section: dict, allowed: dict, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: dict) -> dict:
    """Merge over defaults after rejecting unknown keys and bad values."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, DEFAULT_CONFIG, "config")
    merged = default_config()
    for key, value in cfg.items():
        if isinstance(DEFAULT_CONFIG[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            _check_keys(value, DEFAULT_CONFIG[key], f"section {key!r}")
            merged[key].update(value)
        else:
            merged[key] = value

    _require(isinstance(merged["seed"], int), "seed must be an integer")
    _require(merged["mode"] in MODES, f"mode must be one of {MODES}")
    d = merged["data"]
    _require(isinstance(d["K"], int) and d["K"] >= 2, "data.K must be an integer >= 2")
    _require(isinstance(d["d"], int) and d["d"] >= 1, "data.d must be an integer >= 1")
    for key in ("sigma_id", "semi_shift", "margin", "box", "noise_std"):
        _require(isinstance(d[key], (int, float)) and d[key] > 0, f"data.{key} must be > 0")
    for key in ("n_per_class", "n_test_per_class", "n_semi", "n_full"):
        _require(isinstance(d[key], int) and d[key] >= 1, f"data.{key} must be an integer >= 1")
    m = merged["model"]
    for key in ("width", "n_blocks"):
        _require(isinstance(m[key], int) and m[key] >= 1, f"model.{key} must be an integer >= 1")
    _require(m["sigma_init"] > 0, "model.sigma_init must be > 0")
    t = merged["train"]
    _require(0.0 < t["alpha"] <= 1.0, "train.alpha must be in (0, 1]")
    _require(isinstance(t["n_samples"], int) and t["n_samples"] >= 1, "train.n_samples must be an integer >= 1")
    _require(t["lr"] > 0, "train.lr must be > 0")
    _require(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "train.batch_size must be an integer >= 1")
    _require(isinstance(t["epochs"], int) and t["epochs"] >= 0, "train.epochs must be an integer >= 0")
    _require(t["kl_scale"] is None or t["kl_scale"] > 0, "train.kl_scale must be > 0 (or null for auto)")
    e = merged["eval"]
    _require(isinstance(e["n_samples_eval"], int) and e["n_samples_eval"] >= 1, "eval.n_samples_eval must be >= 1")
    _require(0.0 <= e["trim"] < 0.5, "eval.trim must be in [0, 0.5)")
    _require(isinstance(e["n_bins"], int) and e["n_bins"] >= 1, "eval.n_bins must be an integer >= 1")
    v = merged["verify"]
    for key in ("n_mc", "n_profiles", "ascent_steps", "merge_trials"):
        _require(isinstance(v[key], int) and v[key] >= 1, f"verify.{key} must be an integer >= 1")
    _require(isinstance(v["negative_control"], bool), "verify.negative_control must be a boolean")
    return merged


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return validate_config(raw)


def _trainer_config(cfg: dict) -> TrainerConfig:
    t = cfg["train"]
    return TrainerConfig(
        alpha=t["alpha"],
        n_samples=t["n_samples"],
        lr=t["lr"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        kl_scale=t["kl_scale"],
        mode=cfg["mode"],
        seed=cfg["seed"],
    )


def _spec(cfg: dict) -> BlobSpec:
    d = cfg["data"]
    return BlobSpec(
        K=d["K"], d=d["d"], sigma_id=d["sigma_id"], semi_shift=d["semi_shift"],
        margin=d["margin"], box=d["box"],
    )


# ---- subcommands ------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out_dir) -> int:
    d = cfg["data"]
    try:
        spec = _spec(cfg)
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    bundle = gen_blobs(
        spec,
        n_per_class=d["n_per_class"],
        rng=Rng(cfg["seed"]),
        n_test_per_class=d["n_test_per_class"],
        n_semi=d["n_semi"],
        n_full=d["n_full"],
        noise_std=d["noise_std"],
        standardize=d["standardize"],
    )
    data_dir = os.path.join(out_dir, "data")
    save_bundle(bundle, data_dir)
    print(f"wrote bundle to {data_dir}")
    return EXIT_OK


def cmd_train(cfg: dict, out_dir) -> int:
    data_dir = os.path.join(out_dir, "data")
    bundle = load_bundle(data_dir)
    tcfg = resolve_config(_trainer_config(cfg), bundle.id_train_x.shape[0])
    model_cfg = ModelConfig(
        in_dim=bundle.id_train_x.shape[1],
        n_classes=int(bundle.id_train_y.max()) + 1,
        width=cfg["model"]["width"],
        n_blocks=cfg["model"]["n_blocks"],
        sigma_init=cfg["model"]["sigma_init"],
    )
    model = AbnnModel(model_cfg, Rng(cfg["seed"]).substream(7))
    try:
        log = train(model, bundle, tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc))

    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    save_checkpoint(model, ckpt_path, extra_config={"mode": cfg["mode"], "seed": cfg["seed"]})
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "phase1_loss", "phase2_loss", "phase3_loss", "id_acc", "mean_sigma"])
        for row in log:
            w.writerow(
                [
                    row["epoch"],
                    *("" if row[k] is None else repr(row[k]) for k in ("phase1_loss", "phase2_loss", "phase3_loss")),
                    repr(row["id_acc"]),
                    repr(row["mean_sigma"]),
                ]
            )
    print(f"wrote {ckpt_path}")
    print(f"wrote {log_path}")
    return EXIT_OK


def cmd_eval(cfg: dict, out_dir, checkpoint_path=None) -> int:
    data_dir = os.path.join(out_dir, "data")
    bundle = load_bundle(data_dir)
    ckpt = checkpoint_path or os.path.join(out_dir, "checkpoint.json")
    model, ckpt_cfg = load_checkpoint(ckpt)
    mode = ckpt_cfg.get("mode", cfg["mode"])
    if model.config.in_dim != bundle.id_train_x.shape[1]:
        raise ValueError(
            f"checkpoint expects {model.config.in_dim} features, data has {bundle.id_train_x.shape[1]}"
        )
    e = cfg["eval"]
    n_eval = e["n_samples_eval"]
    stochastic = mode in ("abnn", "bbp")
    rng = Rng(cfg["seed"], _EVAL_STREAM)

    def scores(x, k):
        return evaluation.uncertainty_scores(model, x, n_eval, rng.substream(k), stochastic=stochastic)

    s_id = scores(bundle.id_test_x, 0)
    s_semi = scores(bundle.semi_ood, 1)
    s_full = scores(bundle.full_ood, 2)
    confusion, cluster_acc = evaluation.cluster3(s_id, s_semi, s_full, trim=e["trim"])
    report = evaluation.MetricsReport(
        mode=mode,
        seed=cfg["seed"],
        n_samples_eval=n_eval,
        trim=e["trim"],
        id_accuracy=accuracy(model, bundle.id_test_x, bundle.id_test_y),
        detection_full=evaluation.detection_report(s_id, s_full),
        detection_semi=evaluation.detection_report(s_id, s_semi),
        misclassification=evaluation.misclassification_report(
            model, bundle.id_test_x, bundle.id_test_y, n_eval, rng.substream(3), stochastic=stochastic
        ),
        confusion3=np.asarray(confusion).tolist(),
        cluster_accuracy=cluster_acc,
        uncertainty_medians={
            "id": float(np.median(s_id)),
            "semi": float(np.median(s_semi)),
            "full": float(np.median(s_full)),
        },
        config={"train": cfg["train"], "data": cfg["data"], "model": cfg["model"]},
    )
    doc = report.to_dict()
    evaluation.validate_report(doc)
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    named = {"id": s_id, "semi_ood": s_semi, "full_ood": s_full}
    curves_path = os.path.join(out_dir, "uncertainty_curves.csv")
    hist_path = os.path.join(out_dir, "uncertainty_histograms.csv")
    evaluation.write_ordered_curves(curves_path, named)
    evaluation.write_histograms(hist_path, named, n_bins=e["n_bins"])
    print(f"wrote {report_path}")
    print(f"wrote {curves_path}")
    print(f"wrote {hist_path}")
    return EXIT_OK


def cmd_verify(cfg: dict, out_dir) -> int:
    v = cfg["verify"]
    cdf = std_normal_cdf
    if v["negative_control"]:
        # Self-test of the harness: a corrupted closed form must be caught.
        def cdf(x):
            return std_normal_cdf(x) + 0.05

    checks = theory.run_all_checks(
        seed=cfg["seed"],
        n_mc=v["n_mc"],
        n_profiles=v["n_profiles"],
        ascent_steps=v["ascent_steps"],
        merge_trials=v["merge_trials"],
        cdf=cdf,
    )
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "theory_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(checks, fh, indent=2)
        fh.write("\n")
    for c in checks:
        status = "PASS" if c["pass"] else "FAIL"
        print(f"{c['check']}: statistic={c['statistic']:.6g} {c['op']} bound={c['bound']:.6g} ... {status}")
    print(f"wrote {report_path}")
    return EXIT_OK if all(c["pass"] for c in checks) else EXIT_THEORY


_REPORT_COLUMNS = [
    "label", "mode", "seed", "alpha", "id_accuracy",
    "full_tnr_at_tpr95", "full_auroc", "full_detection_accuracy", "full_aupr_in", "full_aupr_out",
    "semi_auroc", "cluster_accuracy",
]


def cmd_report(inputs, out_path) -> int:
    """Merge eval report JSONs into one comparison table CSV."""
    rows = []
    for path in inputs:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        evaluation.validate_report(doc)
        full = doc["detection"]["full_ood"]
        rows.append(
            {
                "label": os.path.splitext(os.path.basename(path))[0],
                "mode": doc["mode"],
                "seed": doc["seed"],
                "alpha": doc["config"].get("train", {}).get("alpha", ""),
                "id_accuracy": doc["id_accuracy"],
                "full_tnr_at_tpr95": full["tnr_at_tpr95"],
                "full_auroc": full["auroc"],
                "full_detection_accuracy": full["detection_accuracy"],
                "full_aupr_in": full["aupr_in"],
                "full_aupr_out": full["aupr_out"],
                "semi_auroc": doc["detection"]["semi_ood"]["auroc"],
                "cluster_accuracy": doc["cluster3"]["accuracy"],
            }
        )
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out_path}")
    return EXIT_OK


# ---- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (("gen-data", False), ("train", False), ("eval", True), ("verify", False)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON run config")
        sp.add_argument("--out", default=None, help="override the config's out_dir")
        if needs_ckpt:
            sp.add_argument("--checkpoint", default=None, help="checkpoint path (default: <out_dir>/checkpoint.json)")
    sp = sub.add_parser("report")
    sp.add_argument("inputs", nargs="+", help="eval report JSON files to merge")
    sp.add_argument("--out", required=True, help="output comparison CSV path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        cfg = load_config(args.config)
        out_dir = args.out or cfg["out_dir"]
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, checkpoint_path=args.checkpoint)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        raise RuntimeError(f"unhandled command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
