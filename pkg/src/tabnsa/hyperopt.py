"""Random hyperparameter search over the sparse-attention architecture.

Stage 1 samples architectures and training settings uniformly (log-uniform
for the learning rate), fits each candidate, and keeps the one with the best
validation metric. Stage 2 (`refit_best`) retrains the winner from a fresh
initialization and touches the test split exactly once.

Trials are reproducible in isolation: every trial's seed is derived from
(search seed, trial id) with a stable hash, so records can be replayed or
recomputed in any order, including across worker threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import DatasetSplit
from .metrics import classification_report, regression_report
from .model import ModelConfig, count_flops, count_params, init_model_params
from .nsa_attention import NSAConfig
from .training import (
    NanLossError,
    TrainConfig,
    fit,
    fit_lbfgs,
    predict_proba,
    predict_values,
)

THREADS_ENV_VAR = "TABNSA_THREADS"


def _int_range(name: str, lo: int, hi: int, floor: int) -> None:
    if lo < floor or hi < lo:
        raise ValueError(f"{name} range [{lo}, {hi}] must satisfy {floor} <= lo <= hi")


@dataclass(frozen=True)
class SearchSpace:
    """Inclusive integer ranges plus a log-uniform learning-rate interval.

    `select_block` has no fixed upper bound: its ceiling is whatever
    compress_block value was sampled for the same trial. Collapsing every
    range to a point makes sampling deterministic.
    """

    head_dim: tuple = (8, 46)
    heads: tuple = (1, 8)
    window: tuple = (1, 8)
    compress_block: tuple = (4, 16)
    select_block_min: int = 2
    num_selected: tuple = (1, 4)
    lr: tuple = (1e-4, 1e-3)
    batch_size: tuple = (32, 128)

    def __post_init__(self):
        _int_range("head_dim", *self.head_dim, floor=1)
        _int_range("heads", *self.heads, floor=1)
        _int_range("window", *self.window, floor=1)
        _int_range("compress_block", *self.compress_block, floor=2)
        _int_range("num_selected", *self.num_selected, floor=1)
        _int_range("batch_size", *self.batch_size, floor=1)
        if self.select_block_min < 2 or self.select_block_min > self.compress_block[0]:
            raise ValueError("select_block_min must lie in [2, min compress_block]")
        lo, hi = self.lr
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("lr interval must satisfy 0 < lo <= hi < 1")


def sample_config(space: SearchSpace, rng: np.random.Generator, base_train: TrainConfig | None = None):
    """Draw one (NSAConfig, TrainConfig) pair from the space.

    The compression stride is the largest value dividing both block sizes,
    so every draw satisfies the attention config's divisibility rules.
    """
    heads = int(rng.integers(space.heads[0], space.heads[1] + 1))
    head_dim = int(rng.integers(space.head_dim[0], space.head_dim[1] + 1))
    window = int(rng.integers(space.window[0], space.window[1] + 1))
    compress_block = int(rng.integers(space.compress_block[0], space.compress_block[1] + 1))
    select_block = int(rng.integers(space.select_block_min, compress_block + 1))
    num_selected = int(rng.integers(space.num_selected[0], space.num_selected[1] + 1))
    lr = float(np.exp(rng.uniform(np.log(space.lr[0]), np.log(space.lr[1]))))
    batch_size = int(rng.integers(space.batch_size[0], space.batch_size[1] + 1))
    nsa = NSAConfig(
        dim=heads * head_dim,
        heads=heads,
        head_dim=head_dim,
        window=window,
        compress_block=compress_block,
        compress_stride=math.gcd(compress_block, select_block),
        select_block=select_block,
        num_selected=num_selected,
    )
    base = base_train if base_train is not None else TrainConfig()
    train = dataclasses.replace(base, lr=lr, batch_size=batch_size)
    return nsa, train


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    nsa: dict
    train: dict
    val_metric: float
    wall_seconds: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.val_metric <= 1.0:
            raise ValueError(f"val_metric {self.val_metric} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


def derive_trial_seed(seed: int, trial_id: int) -> int:
    """Stable 63-bit seed for one trial; never uses process-salted hashing."""
    digest = hashlib.sha256(f"trial:{seed}:{trial_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _model_for(nsa: NSAConfig, split: DatasetSplit, template: ModelConfig | None) -> ModelConfig:
    features = split.train[0].values.shape[1]
    labels = split.train[1]
    regression = labels.task == "regression"
    if template is None:
        return ModelConfig(
            nsa=nsa, num_tokens=features,
            num_classes=1 if regression else labels.num_classes,
            regression=regression,
        )
    return dataclasses.replace(
        template, nsa=nsa, num_tokens=features,
        num_classes=template.num_classes if regression else labels.num_classes,
        regression=regression,
    )


def _fit_fn(cfg: TrainConfig):
    return fit_lbfgs if cfg.optimizer == "lbfgs" else fit


def run_trial(
    trial_id: int,
    split: DatasetSplit,
    space: SearchSpace,
    seed: int,
    model_template: ModelConfig | None = None,
    base_train: TrainConfig | None = None,
) -> TrialRecord:
    """Sample, fit, and score one candidate; a diverging fit scores 0."""
    trial_seed = derive_trial_seed(seed, trial_id)
    rng = np.random.default_rng(trial_seed)
    nsa, train_cfg = sample_config(space, rng, base_train)
    train_cfg = dataclasses.replace(train_cfg, seed=trial_seed)
    model_cfg = _model_for(nsa, split, model_template)
    start = time.perf_counter()
    try:
        params = init_model_params(model_cfg, rng)
        _, hist = _fit_fn(train_cfg)(params, model_cfg, split, train_cfg)
        metric = hist.val_metric[hist.best_epoch - 1] if hist.val_metric else 0.0
        if not np.isfinite(metric):
            metric = 0.0
    except NanLossError:
        metric = 0.0
    return TrialRecord(
        trial_id=trial_id,
        nsa=dataclasses.asdict(nsa),
        train=dataclasses.asdict(train_cfg),
        val_metric=float(metric),
        wall_seconds=time.perf_counter() - start,
        seed=trial_seed,
    )


def load_trial_log(path: str) -> list[TrialRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TrialRecord.from_json(line))
    return records


def best_so_far_curve(records: list[TrialRecord]) -> list[float]:
    """Running maximum of the validation metric in trial-id order."""
    curve = []
    best = float("-inf")
    for rec in sorted(records, key=lambda r: r.trial_id):
        best = max(best, rec.val_metric)
        curve.append(best)
    return curve


def _worker_count(max_workers: int | None) -> int:
    if max_workers is not None:
        return max(1, max_workers)
    env = os.environ.get(THREADS_ENV_VAR, "").strip()
    if env:
        return max(1, int(env))
    return 1


def run_search(
    split: DatasetSplit,
    space: SearchSpace,
    budget: int,
    seed: int,
    model_template: ModelConfig | None = None,
    base_train: TrainConfig | None = None,
    log_path: str | None = None,
    max_workers: int | None = None,
):
    """Run `budget` independent trials and return (best record, all records).

    Ties on the metric go to the earlier trial. Previously logged trials in
    `log_path` whose stored seed matches the derived one are reused instead
    of recomputed, so an interrupted search resumes where it stopped.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if split.train[1].task != "classification":
        raise ValueError("search maximizes a classification metric; got a regression task")
    done: dict[int, TrialRecord] = {}
    if log_path and os.path.exists(log_path):
        for rec in load_trial_log(log_path):
            if 0 <= rec.trial_id < budget and rec.seed == derive_trial_seed(seed, rec.trial_id):
                done[rec.trial_id] = rec
    pending = [t for t in range(budget) if t not in done]

    log_lock = threading.Lock()

    def execute(trial_id: int) -> TrialRecord:
        rec = run_trial(trial_id, split, space, seed, model_template, base_train)
        if log_path:
            with log_lock, open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
        return rec

    workers = _worker_count(max_workers)
    if workers == 1 or len(pending) <= 1:
        fresh = [execute(t) for t in pending]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(execute, pending))
    records = sorted(list(done.values()) + fresh, key=lambda r: r.trial_id)
    best = records[0]
    for rec in records[1:]:
        if rec.val_metric > best.val_metric:
            best = rec
    return best, records


def refit_best(
    record: TrialRecord,
    split: DatasetSplit,
    model_template: ModelConfig | None = None,
    optimizer: str | None = None,
    seed: int = 0,
) -> tuple[dict, dict]:
    """Retrain the winning config from a fresh init and score the test split.

    The test rows are read exactly once, here. Returns (report, fitted
    params); the report carries the evaluated config, parameter count, and
    per-row forward FLOPs so the result is self-describing.
    """
    nsa = NSAConfig(**record.nsa)
    train_cfg = TrainConfig(**record.train)
    refit_seed = derive_trial_seed(seed, -1)
    train_cfg = dataclasses.replace(
        train_cfg,
        seed=refit_seed,
        optimizer=optimizer if optimizer is not None else train_cfg.optimizer,
    )
    model_cfg = _model_for(nsa, split, model_template)
    params = init_model_params(model_cfg, np.random.default_rng(refit_seed))
    params, hist = _fit_fn(train_cfg)(params, model_cfg, split, train_cfg)

    x_test, y_test = split.test
    if model_cfg.regression:
        report = regression_report(predict_values(params, model_cfg, x_test.values), y_test.labels)
    else:
        probs = predict_proba(params, model_cfg, x_test.values)
        report = classification_report(probs, y_test.labels, model_cfg.num_classes)
    total_flops, flop_breakdown = count_flops(model_cfg, batch_size=1)
    return {
        "config": {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)},
        "seed": seed,
        "val_metric_search": record.val_metric,
        "val_metric_refit": hist.val_metric[hist.best_epoch - 1] if hist.val_metric else None,
        "test": report.to_dict(),
        "param_count": count_params(model_cfg),
        "flops_per_row": total_flops,
        "flops_breakdown": flop_breakdown,
    }, params
