"""Command-line surface: train, tune, eval, transfer, ablate, flops.

All commands consume one versioned JSON config (flags override file fields)
and write deterministic artifacts: rerunning a command with the same config
and seeds reproduces every output byte for byte, except the timestamps that
live only in manifest.json.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    DatasetSplit,
    PreprocessState,
    apply_preprocess,
    class_weights,
    load_csv,
    prepare_dataset,
    transfer_split,
)
from .hyperopt import (
    SearchSpace,
    best_so_far_curve,
    refit_best,
    run_search,
)
from .metrics import classification_report, regression_report
from .model import (
    ModelConfig,
    count_flops,
    count_params,
    dense_attention_flops,
    init_model_params,
    load_checkpoint,
    save_checkpoint,
)
from .nsa_attention import NSAConfig
from .training import (
    NanLossError,
    TrainConfig,
    fit,
    fit_lbfgs,
    predict_proba,
    predict_values,
)

CONFIG_VERSION = 1

FUSION_CHOICES = ("o", "m", "c", "r")
ABLATE_AXES = ("fusion", "blocks", "optimizer", "sparse_params")

# one-at-a-time sweep grids for the sparse_params ablation axis
SPARSE_SWEEPS = {
    "window": (1, 2, 4, 8),
    "compress_block": (4, 8, 16),
    "select_block": (2, 4),
    "num_selected": (1, 2, 4),
}


class ConfigError(Exception):
    """Invalid config input; `field` is the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "data": {"csv": None, "target": None, "schema": None, "seed": 0},
        "model": {
            "nsa": {
                "heads": 2,
                "head_dim": 8,
                "window": 3,
                "compress_block": 4,
                "compress_stride": 2,
                "select_block": 2,
                "num_selected": 2,
                "causal": False,
            },
            "num_tokens": None,
            "num_classes": None,
            "regression": None,
            "hidden_head": 64,
            "num_blocks": 1,
            "fusion": "o",
            "feature_id_embedding": True,
        },
        "train": dataclasses.asdict(TrainConfig()),
        "search": {
            "budget": 50,
            "seed": 0,
            "space": dataclasses.asdict(SearchSpace()),
        },
    }


def _merge(base: dict, override: dict, path: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown config field")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults deep-merged with the file at `path`; unknown keys rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"invalid JSON: {err}")
    if not isinstance(user, dict):
        raise ConfigError("config", "top level must be a JSON object")
    version = user.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}")
    return _merge(cfg, user, "")


def apply_flag_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy
    if getattr(args, "csv", None):
        cfg["data"]["csv"] = args.csv
    if getattr(args, "target", None):
        cfg["data"]["target"] = args.target
    if getattr(args, "optimizer", None):
        cfg["train"]["optimizer"] = args.optimizer
    if getattr(args, "fusion", None):
        cfg["model"]["fusion"] = args.fusion
    if getattr(args, "causal", False):
        cfg["model"]["nsa"]["causal"] = True
    if getattr(args, "no_feature_ids", False):
        cfg["model"]["feature_id_embedding"] = False
    if getattr(args, "budget", None) is not None:
        cfg["search"]["budget"] = args.budget
    return cfg


def build_nsa_config(nsa_cfg: dict, field: str = "model.nsa") -> NSAConfig:
    """dim is derived from heads*head_dim; a null stride means the largest
    value dividing both block sizes."""
    d = dict(nsa_cfg)
    heads, head_dim = d.get("heads"), d.get("head_dim")
    if not isinstance(heads, int) or not isinstance(head_dim, int):
        raise ConfigError(field, "heads and head_dim must be integers")
    expected_dim = heads * head_dim
    dim = d.pop("dim", None)
    if dim is not None and dim != expected_dim:
        raise ConfigError(f"{field}.dim", f"dim {dim} != heads*head_dim {expected_dim}")
    if d.get("compress_stride") is None:
        d["compress_stride"] = math.gcd(int(d["compress_block"]), int(d["select_block"]))
    try:
        return NSAConfig(dim=expected_dim, **d)
    except (TypeError, ValueError) as err:
        raise ConfigError(field, str(err))


def build_train_config(train_cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**train_cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError("train", str(err))


def build_search_space(space_cfg: dict) -> SearchSpace:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in space_cfg.items()}
    try:
        return SearchSpace(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError("search.space", str(err))


def build_model_config(cfg: dict, split: DatasetSplit | None) -> ModelConfig:
    model = cfg["model"]
    nsa = build_nsa_config(model["nsa"])
    num_tokens = model["num_tokens"]
    num_classes = model["num_classes"]
    regression = model["regression"]
    if split is not None:
        data_tokens = split.train[0].values.shape[1]
        data_regression = split.train[1].task == "regression"
        data_classes = 1 if data_regression else split.train[1].num_classes
        for name, pinned, derived in (
            ("model.num_tokens", num_tokens, data_tokens),
            ("model.num_classes", num_classes, data_classes),
            ("model.regression", regression, data_regression),
        ):
            if pinned is not None and pinned != derived:
                raise ConfigError(name, f"config value {pinned!r} disagrees with the data ({derived!r})")
        num_tokens, num_classes, regression = data_tokens, data_classes, data_regression
    if num_tokens is None:
        raise ConfigError("model.num_tokens", "required when no dataset is given")
    try:
        return ModelConfig(
            nsa=nsa,
            num_tokens=num_tokens,
            num_classes=num_classes if num_classes is not None else 2,
            regression=bool(regression),
            hidden_head=model["hidden_head"],
            num_blocks=model["num_blocks"],
            fusion=model["fusion"],
            feature_id_embedding=model["feature_id_embedding"],
        )
    except (TypeError, ValueError) as err:
        raise ConfigError("model", str(err))


def load_table(cfg: dict, field: str = "data"):
    data = cfg["data"]
    if not data.get("csv"):
        raise ConfigError(f"{field}.csv", "a CSV path is required (flag --csv or config)")
    if not data.get("target"):
        raise ConfigError(f"{field}.target", "a target column name is required (flag --target or config)")
    try:
        return load_csv(data["csv"], data["target"], data.get("schema"))
    except FileNotFoundError:
        raise ConfigError(f"{field}.csv", f"file not found: {data['csv']}")
    except ValueError as err:
        raise ConfigError(f"{field}", str(err))


def parse_seeds(text: str) -> list[int]:
    """Seed lists: '0,1,2' or inclusive ranges '0..9'."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        start, end = int(lo), int(hi)
        if end < start:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(start, end + 1))
    seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


# -- artifact writing ----------------------------------------------------------


def _sanitize(obj):
    """numpy scalars -> python; non-finite floats -> null; containers recursed."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_sanitize(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _print_json(obj) -> None:
    print(json.dumps(_sanitize(obj), sort_keys=True))


def _write_manifest(outdir: str, command: str, cfg: dict, seeds: list[int], started: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "config": cfg,
        "seeds": seeds,
        "out_dir": os.path.abspath(outdir),
        "started_at": started,
        "finished_at": _now(),
    }
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(outdir, "manifest.json"), manifest)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _fit_fn(train_cfg: TrainConfig):
    return fit_lbfgs if train_cfg.optimizer == "lbfgs" else fit


def _test_report(params: dict, model_cfg: ModelConfig, split: DatasetSplit):
    x_test, y_test = split.test
    if model_cfg.regression:
        return regression_report(predict_values(params, model_cfg, x_test.values), y_test.labels)
    probs = predict_proba(params, model_cfg, x_test.values)
    return classification_report(probs, y_test.labels, model_cfg.num_classes)


def _metric_name(report_dict: dict) -> str:
    if report_dict.get("rmse") is not None:
        return "rmse"
    if report_dict.get("auc") is not None:
        return "auc"
    return "macro_f1"


def _train_once(cfg: dict, raw, seed: int):
    """One seed of the train pipeline: split, fit, score the test set once."""
    split, state = prepare_dataset(raw, seed)
    model_cfg = build_model_config(cfg, split)
    train_cfg = dataclasses.replace(build_train_config(cfg["train"]), seed=seed)
    params = init_model_params(model_cfg, np.random.default_rng(seed))
    params, history = _fit_fn(train_cfg)(params, model_cfg, split, train_cfg)
    report = _test_report(params, model_cfg, split)
    total_flops, _ = count_flops(model_cfg, batch_size=1)
    summary = {
        "seed": seed,
        "test": report.to_dict(),
        "best_epoch": history.best_epoch,
        "epochs_run": len(history.train_loss),
        "stopped_early": history.stopped_early,
        "val_loss_best": history.val_loss[history.best_epoch - 1] if history.val_loss else None,
        "val_metric_best": history.val_metric[history.best_epoch - 1] if history.val_metric else None,
        "param_count": count_params(model_cfg),
        "flops_per_row": total_flops,
    }
    return summary, params, history, model_cfg, state


def _aggregate(reports: list[dict]) -> dict:
    agg: dict = {"n_seeds": len(reports), "metrics": {}}
    for key in ("auc", "accuracy", "macro_f1", "rmse"):
        values = [r["test"][key] for r in reports if r["test"].get(key) is not None]
        if values:
            agg["metrics"][key] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "per_seed": [float(v) for v in values],
            }
    return agg


# -- commands -------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    cfg = apply_flag_overrides(load_config(args.config), args)
    seeds = parse_seeds(args.seeds)
    raw = load_table(cfg)
    os.makedirs(args.out, exist_ok=True)
    summaries = []
    for seed in seeds:
        summary, params, history, model_cfg, state = _train_once(cfg, raw, seed)
        summaries.append(summary)
        tag = f"s{seed}"
        _write_json(os.path.join(args.out, f"report_{tag}.json"), summary)
        with open(os.path.join(args.out, f"history_{tag}.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(history.to_jsonl())
        save_checkpoint(os.path.join(args.out, f"checkpoint_{tag}.bin"), params, model_cfg)
        with open(os.path.join(args.out, f"preprocess_{tag}.json"), "w", encoding="utf-8") as fh:
            fh.write(state.to_json() + "\n")
    aggregate = _aggregate(summaries)
    _write_json(os.path.join(args.out, "aggregate.json"), aggregate)
    _write_json(os.path.join(args.out, "config.json"), cfg)
    _write_manifest(args.out, "train", cfg, seeds, started)
    _print_json(aggregate["metrics"])
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    started = _now()
    cfg = apply_flag_overrides(load_config(args.config), args)
    raw = load_table(cfg)
    budget = cfg["search"]["budget"]
    if budget < 1:
        raise ConfigError("search.budget", "must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    seed = cfg["search"]["seed"]
    split, state = prepare_dataset(raw, seed)
    space = build_search_space(cfg["search"]["space"])
    template = build_model_config(cfg, split)
    base_train = build_train_config(cfg["train"])
    log_path = os.path.join(args.out, "trials.jsonl")
    best, records = run_search(
        split, space, budget, seed,
        model_template=template, base_train=base_train, log_path=log_path,
    )
    curve = best_so_far_curve(records)
    with open(os.path.join(args.out, "sensitivity.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id", "val_metric", "best_so_far"])
        for rec, best_val in zip(sorted(records, key=lambda r: r.trial_id), curve):
            writer.writerow([rec.trial_id, f"{rec.val_metric:.6f}", f"{best_val:.6f}"])
    report, params = refit_best(
        best, split, model_template=template,
        optimizer=getattr(args, "optimizer", None), seed=seed,
    )
    model_cfg = ModelConfig.from_dict(report["config"]["model"])
    save_checkpoint(os.path.join(args.out, "checkpoint_best.bin"), params, model_cfg)
    with open(os.path.join(args.out, "preprocess.json"), "w", encoding="utf-8") as fh:
        fh.write(state.to_json() + "\n")
    best_cfg = json.loads(json.dumps(cfg))
    nsa_dict = dict(best.nsa)
    nsa_dict.pop("dim", None)
    best_cfg["model"]["nsa"] = nsa_dict
    best_cfg["train"] = report["config"]["train"]
    _write_json(os.path.join(args.out, "best_config.json"), best_cfg)
    _write_json(os.path.join(args.out, "refit_report.json"), report)
    _write_manifest(args.out, "tune", cfg, [seed], started, extra={"budget": budget})
    _print_json({"best_trial": best.trial_id, "val_metric": best.val_metric, "test": report["test"]})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    state_path = args.preprocess or os.path.join(
        os.path.dirname(args.checkpoint),
        os.path.basename(args.checkpoint).replace("checkpoint", "preprocess").replace(".bin", ".json"),
    )
    try:
        with open(state_path, "r", encoding="utf-8") as fh:
            state = PreprocessState.from_json(fh.read())
    except FileNotFoundError:
        raise ConfigError("preprocess", f"preprocess state not found: {state_path}")
    cfg = apply_flag_overrides(load_config(args.config), args)
    if not cfg["data"].get("target"):
        cfg["data"]["target"] = state.target["name"]
    raw = load_table(cfg)
    features, labels = apply_preprocess(raw, state)
    if features.values.shape[1] != model_cfg.num_tokens:
        raise ConfigError("data.csv", f"{features.values.shape[1]} features; checkpoint expects {model_cfg.num_tokens}")
    if model_cfg.regression:
        report = regression_report(predict_values(params, model_cfg, features.values), labels.labels)
    else:
        probs = predict_proba(params, model_cfg, features.values)
        report = classification_report(probs, labels.labels, model_cfg.num_classes)
    payload = {"checkpoint": os.path.basename(args.checkpoint), "rows": int(features.values.shape[0]), "report": report.to_dict()}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval_report.json"), payload)
    _print_json(payload)
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    started = _now()
    cfg = apply_flag_overrides(load_config(args.config), args)
    raw = load_table(cfg)
    seed = cfg["search"]["seed"]
    budget = cfg["search"]["budget"]
    space = build_search_space(cfg["search"]["space"])
    base_train = build_train_config(cfg["train"])
    os.makedirs(args.out, exist_ok=True)
    set1, set2 = transfer_split(raw, args.overlap, seed)
    shared = sorted(set(c.name for c in set1.feature_columns) & set(c.name for c in set2.feature_columns))

    def direction(src, dst, label: str) -> dict:
        split_src, _ = prepare_dataset(src, seed)
        template_src = build_model_config(cfg, split_src)
        best, _records = run_search(
            split_src, space, budget, seed,
            model_template=template_src, base_train=base_train,
            log_path=os.path.join(args.out, f"trials_{label}.jsonl"),
        )
        split_dst, _state = prepare_dataset(dst, seed)
        nsa = NSAConfig(**best.nsa)
        template_dst = build_model_config(cfg, split_dst)
        model_cfg = dataclasses.replace(template_dst, nsa=nsa)
        train_cfg = TrainConfig(**best.train)
        if getattr(args, "optimizer", None):
            train_cfg = dataclasses.replace(train_cfg, optimizer=args.optimizer)
        params = init_model_params(model_cfg, np.random.default_rng(best.seed))
        params, history = _fit_fn(train_cfg)(params, model_cfg, split_dst, train_cfg)
        report = _test_report(params, model_cfg, split_dst)
        return {
            "tuned_nsa": best.nsa,
            "applied_nsa": dataclasses.asdict(model_cfg.nsa),
            "tuned_val_metric": best.val_metric,
            "best_trial": best.trial_id,
            "epochs_run": len(history.train_loss),
            "test": report.to_dict(),
        }

    forward = direction(set1, set2, "set1")
    backward = direction(set2, set1, "set2")
    for leg in (forward, backward):
        if leg["applied_nsa"] != leg["tuned_nsa"]:
            raise RuntimeError("transfer protocol violation: applied hyperparameters differ from tuned ones")
    result = {
        "overlap": args.overlap,
        "shared_features": shared,
        "set1_features": [c.name for c in set1.feature_columns],
        "set2_features": [c.name for c in set2.feature_columns],
        "set1_to_set2": forward,
        "set2_to_set1": backward,
    }
    _write_json(os.path.join(args.out, "transfer.json"), result)
    _write_manifest(args.out, "transfer", cfg, [seed], started, extra={"overlap": args.overlap})
    _print_json({"set1_to_set2": forward["test"], "set2_to_set1": backward["test"]})
    return 0


def _ablate_settings(what: str, cfg: dict) -> list[tuple[str, str, dict]]:
    """(parameter, value-label, config-overrides) triples for one axis."""
    rows: list[tuple[str, str, dict]] = []
    if what == "fusion":
        for variant in FUSION_CHOICES:
            rows.append(("fusion", variant, {"model": {"fusion": variant}}))
    elif what == "blocks":
        for depth in (1, 2, 3, 4):
            rows.append(("num_blocks", str(depth), {"model": {"num_blocks": depth}}))
    elif what == "optimizer":
        for opt in ("adamw", "lbfgs"):
            rows.append(("optimizer", opt, {"train": {"optimizer": opt}}))
    elif what == "sparse_params":
        baseline = cfg["model"]["nsa"]
        for name, grid in SPARSE_SWEEPS.items():
            for value in grid:
                if name == "select_block" and value > baseline["compress_block"]:
                    continue
                rows.append((name, str(value), {"model": {"nsa": {name: value, "compress_stride": None}}}))
    else:
        raise ConfigError("ablate", f"unknown axis {what!r}; expected one of {ABLATE_AXES}")
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    started = _now()
    cfg = apply_flag_overrides(load_config(args.config), args)
    seeds = parse_seeds(args.seeds)
    raw = load_table(cfg)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for parameter, value, overrides in _ablate_settings(args.what, cfg):
        merged = _merge(json.loads(json.dumps(cfg)), overrides, "")
        reports = []
        for seed in seeds:
            summary, *_ = _train_once(merged, raw, seed)
            reports.append(summary)
        metric = _metric_name(reports[0]["test"])
        values = [r["test"][metric] for r in reports if r["test"][metric] is not None]
        rows.append({
            "parameter": parameter,
            "value": value,
            "metric_name": metric,
            "mean": float(np.mean(values)) if values else float("nan"),
            "std": float(np.std(values)) if values else float("nan"),
            "n_seeds": len(seeds),
        })
    table_path = os.path.join(args.out, f"ablation_{args.what}.csv")
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "metric_name", "mean", "std", "n_seeds"])
        for row in rows:
            writer.writerow([
                row["parameter"], row["value"], row["metric_name"],
                f"{row['mean']:.6f}", f"{row['std']:.6f}", row["n_seeds"],
            ])
    _write_json(os.path.join(args.out, f"ablation_{args.what}.json"), rows)
    _write_manifest(args.out, "ablate", cfg, seeds, started, extra={"what": args.what})
    _print_json(rows)
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    cfg = apply_flag_overrides(load_config(args.config), args)
    split = None
    if cfg["data"].get("csv"):
        # shape the model from the dataset exactly as train would
        split, _ = prepare_dataset(load_table(cfg), cfg["data"]["seed"])
    model_cfg = build_model_config(cfg, split)
    total, breakdown = count_flops(model_cfg, batch_size=1)
    payload = {
        "batch_size": 1,
        "num_tokens": model_cfg.num_tokens,
        "param_count": count_params(model_cfg),
        "flops_total": total,
        "flops_breakdown": breakdown,
    }
    if args.compare_dense:
        payload["dense_attention_computation"] = dense_attention_flops(model_cfg, batch_size=1)
        payload["sparse_attention_computation"] = breakdown["attention_computation"]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "flops.json"), payload)
    _print_json(payload)
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser, *, out_required: bool) -> None:
    sub.add_argument("--config", default=None, help="JSON config path; defaults apply when omitted")
    sub.add_argument("--csv", default=None, help="dataset CSV (overrides config data.csv)")
    sub.add_argument("--target", default=None, help="target column name (overrides config data.target)")
    sub.add_argument("--out", required=out_required, default=None, help="output directory")
    sub.add_argument("--optimizer", choices=("adamw", "lbfgs"), default=None)
    sub.add_argument("--fusion", choices=FUSION_CHOICES, default=None)
    sub.add_argument("--causal", action="store_true", help="causal attention masks")
    sub.add_argument("--no-feature-ids", action="store_true", help="disable the per-feature identity embedding")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabnsa", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="fit on a CSV and report test metrics")
    _add_common(p_train, out_required=True)
    p_train.add_argument("--seeds", default="0", help="'0,1,2' or '0..9'")

    p_tune = subs.add_parser("tune", help="random search then refit the best config")
    _add_common(p_tune, out_required=True)
    p_tune.add_argument("--budget", type=int, default=None, help="trial count (overrides config search.budget)")

    p_eval = subs.add_parser("eval", help="score a saved checkpoint on a CSV")
    _add_common(p_eval, out_required=False)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--preprocess", default=None, help="preprocess state JSON (default: sibling of checkpoint)")

    p_transfer = subs.add_parser("transfer", help="feature-overlap transfer protocol, both directions")
    _add_common(p_transfer, out_required=True)
    p_transfer.add_argument("--overlap", type=float, required=True, help="shared-feature fraction in [0, 1]")
    p_transfer.add_argument("--budget", type=int, default=None)

    p_ablate = subs.add_parser("ablate", help="sweep one axis against a fixed baseline")
    _add_common(p_ablate, out_required=True)
    p_ablate.add_argument("--what", choices=ABLATE_AXES, required=True)
    p_ablate.add_argument("--seeds", default="0,1,2")

    p_flops = subs.add_parser("flops", help="per-component FLOPs and parameter counts")
    _add_common(p_flops, out_required=False)
    p_flops.add_argument("--compare-dense", action="store_true")
    return parser


COMMANDS = {
    "train": cmd_train,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NanLossError as err:
        print(f"training failed: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        # bad user input (seed lists, table shape, overlap bounds)
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
