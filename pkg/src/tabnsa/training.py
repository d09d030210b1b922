"""Losses and trainers over the flat parameter-dict representation.

Two drivers share the early-stopping contract on validation loss: `fit`
runs seeded shuffled mini-batches with AdamW (decoupled weight decay), and
`fit_lbfgs` runs full-batch L-BFGS with two-loop recursion and Armijo
backtracking. Both restore the best-validation-loss weights before
returning. `lbfgs_minimize` is the generic vector minimizer underneath.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Tensor
from .data import DatasetSplit, LabelVector, class_weights
from .model import ModelConfig, forward

OPTIMIZERS = ("adamw", "lbfgs")
LOSSES = ("weighted_cross_entropy", "mse")

# Curvature pairs whose s.y falls below this fraction of s.(B0 s) are damped
# toward the scaled identity so the inverse-Hessian estimate stays positive
# definite under an Armijo-only line search.
DAMPING_FLOOR = 1e-3


class NanLossError(RuntimeError):
    """Training aborted because a mini-batch loss went non-finite."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite training loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class LBFGSConfig:
    history: int = 10
    max_line_search: int = 25
    tolerance: float = 1e-10

    def __post_init__(self):
        if self.history < 0:
            raise ValueError("history must be >= 0")
        if self.max_line_search < 1:
            raise ValueError("max_line_search must be >= 1")
        if self.tolerance < 0.0:
            raise ValueError("tolerance must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    loss: str = "weighted_cross_entropy"
    seed: int = 0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    lbfgs: LBFGSConfig = field(default_factory=LBFGSConfig)

    def __post_init__(self):
        # accept dict forms so configs survive a JSON round trip
        if isinstance(self.adamw, dict):
            object.__setattr__(self, "adamw", AdamWConfig(**self.adamw))
        if isinstance(self.lbfgs, dict):
            object.__setattr__(self, "lbfgs", LBFGSConfig(**self.lbfgs))
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        # lr = 0 stays legal as the degenerate no-op step
        if not (0.0 <= self.lr < 1.0):
            raise ValueError("lr must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")


@dataclass
class TrainHistory:
    train_loss: list
    val_loss: list
    val_metric: list
    best_epoch: int  # 1-based epoch whose weights were returned
    stopped_early: bool

    def __post_init__(self):
        if not (len(self.train_loss) == len(self.val_loss) == len(self.val_metric)):
            raise ValueError("history columns must have equal length")
        if self.train_loss and not (1 <= self.best_epoch <= len(self.train_loss)):
            raise ValueError("best_epoch out of range")

    def to_jsonl(self) -> str:
        def clean(v):
            return float(v) if np.isfinite(v) else None

        lines = []
        for i, (tl, vl, vm) in enumerate(zip(self.train_loss, self.val_loss, self.val_metric), start=1):
            rec = {"epoch": i, "train_loss": clean(tl), "val_loss": clean(vl), "val_metric": clean(vm)}
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)


# -- losses --------------------------------------------------------------------


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean over the batch of w_{y_b} * (-log softmax(logits_b)[y_b]).

    The log-sum-exp is shifted by the per-row max (held constant) so the
    loss and its gradient stay finite for any finite logits.
    """
    if not np.isfinite(logits.data).all():
        raise ValueError("non-finite logits")
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if b == 0:
        raise ValueError("empty batch has no defined loss")
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside [0, num_classes)")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    nll = ad.log(ad.exp(z).sum(axis=1)) - z[np.arange(b), labels]
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (c,):
            raise ValueError(f"expected {c} class weights, got shape {w.shape}")
        nll = nll * Tensor(w[labels])
    return nll.mean()


def mse_loss(pred: Tensor, targets) -> Tensor:
    """Mean squared error; gradient w.r.t. pred is 2(pred - y)/B."""
    t = np.asarray(targets, dtype=np.float64)
    if not np.isfinite(pred.data).all() or not np.isfinite(t).all():
        raise ValueError("non-finite prediction or target")
    if pred.ndim == 2 and pred.shape[1] == 1:
        pred = pred.reshape((pred.shape[0],))
    if pred.shape != t.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {t.shape}")
    diff = pred - Tensor(t)
    return (diff * diff).mean()


def grad_or_zero(p: Tensor) -> np.ndarray:
    """Unused parameters carry no gradient entry; treat that as zero."""
    return np.zeros_like(p.data) if p.grad is None else p.grad


# -- optimizers ------------------------------------------------------------------


class AdamW:
    """Adam moment estimates with decoupled weight decay:
    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)."""

    def __init__(self, params: dict[str, Tensor], lr: float, cfg: AdamWConfig | None = None):
        self.params = params
        self.lr = float(lr)
        self.cfg = cfg or AdamWConfig()
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grad_or_zero(p)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.cfg.eps) + self.cfg.weight_decay * p.data)


class EarlyStopper:
    """Strict-improvement tracking with a snapshot of the best weights."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.snapshot: dict[str, np.ndarray] | None = None

    def update(self, epoch: int, val_loss: float, params: dict[str, Tensor]) -> bool:
        """Record this epoch; True means patience is exhausted."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            self.snapshot = {k: p.data.copy() for k, p in params.items()}
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, params: dict[str, Tensor]) -> None:
        if self.snapshot is not None:
            for k, p in params.items():
                p.data[...] = self.snapshot[k]


# -- shared fit plumbing ---------------------------------------------------------


def _check_task(loss: str, labels: LabelVector) -> None:
    want = "mse" if labels.task == "regression" else "weighted_cross_entropy"
    if loss != want:
        raise ValueError(f"loss {loss!r} does not fit task {labels.task!r}")


def _loss_tensor(logits: Tensor, labels: LabelVector, rows, weights) -> Tensor:
    if labels.task == "regression":
        return mse_loss(logits, labels.labels[rows])
    return weighted_cross_entropy(logits, labels.labels[rows], weights)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(params: dict, model_cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """(B, C) class probabilities, no gradient tracking."""
    with ad.no_grad():
        logits = forward(x, params, model_cfg)
    return _softmax_np(logits.data)


def predict_values(params: dict, model_cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """(B,) regression predictions, no gradient tracking."""
    with ad.no_grad():
        out = forward(x, params, model_cfg)
    return out.data.reshape(-1)


def evaluate_loss_metric(params, model_cfg, x, labels: LabelVector, weights):
    """Validation loss plus the task metric (AUC for binary, macro-F1 for
    multi-class, RMSE for regression). Non-finite logits yield an infinite
    loss so the caller's early stopping can react instead of crashing."""
    with ad.no_grad():
        logits = forward(x, params, model_cfg)
    z = logits.data
    if not np.isfinite(z).all():
        return np.inf, float("nan")
    rows = np.arange(x.shape[0])
    with ad.no_grad():
        loss = float(_loss_tensor(logits, labels, rows, weights).item())
    if labels.task == "regression":
        metric = metrics.rmse(z.reshape(-1), labels.labels)
    elif labels.num_classes == 2:
        if np.unique(labels.labels).size < 2:
            metric = float("nan")
        else:
            metric = metrics.roc_auc(_softmax_np(z)[:, 1], labels.labels)
    else:
        metric = metrics.macro_f1(z.argmax(axis=1), labels.labels, labels.num_classes)
    return loss, metric


def _train_weights(labels: LabelVector, loss_kind: str):
    if loss_kind == "weighted_cross_entropy":
        return class_weights(labels)
    return None


# -- mini-batch AdamW driver -----------------------------------------------------


def fit(params: dict, model_cfg: ModelConfig, split: DatasetSplit, cfg: TrainConfig):
    """Seeded shuffled mini-batch training; returns (params, TrainHistory)
    with the best-validation-loss weights restored in place."""
    if cfg.optimizer != "adamw":
        raise ValueError("fit drives adamw; use fit_lbfgs for the lbfgs optimizer")
    x_tr, y_tr = split.train[0].values, split.train[1]
    x_va, y_va = split.val[0].values, split.val[1]
    _check_task(cfg.loss, y_tr)
    weights = _train_weights(y_tr, cfg.loss)
    opt = AdamW(params, cfg.lr, cfg.adamw)
    stopper = EarlyStopper(cfg.patience)
    rng = np.random.default_rng(cfg.seed)
    n = x_tr.shape[0]
    train_hist, val_hist, metric_hist = [], [], []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        running = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            rows = perm[start:start + cfg.batch_size]
            try:
                logits = forward(x_tr[rows], params, model_cfg)
                loss = _loss_tensor(logits, y_tr, rows, weights)
            except ValueError as err:
                raise NanLossError(epoch, bi) from err
            value = float(loss.item())
            if not np.isfinite(value):
                raise NanLossError(epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += value * rows.size
        train_hist.append(running / n)
        val_loss, val_metric = evaluate_loss_metric(params, model_cfg, x_va, y_va, weights)
        val_hist.append(val_loss)
        metric_hist.append(val_metric)
        if stopper.update(epoch, val_loss, params):
            stopped = True
            break
    stopper.restore(params)
    history = TrainHistory(train_hist, val_hist, metric_hist, stopper.best_epoch, stopped)
    return params, history


# -- L-BFGS ----------------------------------------------------------------------


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    steps: int  # accepted steps
    converged: bool  # gradient norm fell below tolerance
    line_search_failures: int  # consecutive failures at exit


def _two_loop(g: np.ndarray, pairs: list) -> np.ndarray:
    """H @ g via the standard two-loop recursion; identity H0 scaled by
    gamma = (s.y)/(y.y) of the newest pair. Empty history -> g unchanged."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(
    fun,
    x0: np.ndarray,
    history: int = 10,
    max_iters: int = 200,
    grad_tol: float = 1e-10,
    c1: float = 1e-4,
    backtrack: float = 0.5,
    max_line_search: int = 25,
    max_consecutive_failures: int = 20,
    callback=None,
) -> LBFGSResult:
    """Minimize fun(x) -> (f, grad) with L-BFGS + Armijo backtracking.

    history=0 degrades to steepest descent. Low-curvature pairs are damped
    toward the scaled identity before storage. After
    `max_consecutive_failures` line searches in a row fail, the best point
    so far is returned. `callback(step, x, f)` runs after each accepted
    step; returning True stops the loop.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    pairs: list = []
    fails = 0
    steps = 0
    converged = False
    gamma = 1.0  # scale of the implicit initial inverse Hessian
    for _ in range(max_iters):
        if np.linalg.norm(g) <= grad_tol:
            converged = True
            break
        p = -_two_loop(g, pairs)
        gtp = g @ p
        if not np.isfinite(gtp) or gtp >= 0.0:  # not a descent direction; reset
            p = -g
            gtp = g @ p
        alpha = 1.0
        accepted = None
        for _probe in range(max_line_search):
            ft, gt = fun(x + alpha * p)
            if np.isfinite(ft) and ft <= f + c1 * alpha * gtp:
                accepted = (ft, gt, alpha)
                break
            alpha *= backtrack
        if accepted is None:
            fails += 1
            pairs.clear()  # stale curvature is the usual culprit
            if fails >= max_consecutive_failures:
                break
            continue
        fails = 0
        ft, gt, alpha = accepted
        s = alpha * p
        yv = gt - g
        sy = s @ yv
        # Armijo-only searches admit negative-curvature steps; damping the
        # pair against the gamma-scaled identity keeps the approximation
        # positive definite instead of freezing it.
        s_b_s = (s @ s) / gamma
        if np.isfinite(s_b_s) and sy < DAMPING_FLOOR * s_b_s:
            theta = (1.0 - DAMPING_FLOOR) * s_b_s / (s_b_s - sy)
            yv = theta * yv + (1.0 - theta) * s / gamma
            sy = s @ yv
        if np.isfinite(sy) and sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / sy))
            gamma = sy / (yv @ yv)
            if history == 0:
                pairs.clear()
            elif len(pairs) > history:
                pairs.pop(0)
        x = x + s
        f, g = ft, gt
        steps += 1
        if callback is not None and callback(steps, x, f):
            break
    return LBFGSResult(x=x, fun=f, steps=steps, converged=converged, line_search_failures=fails)


def _read_vec(params: dict, names: list) -> np.ndarray:
    return np.concatenate([params[k].data.ravel() for k in names]) if names else np.zeros(0)


def _write_vec(params: dict, names: list, vec: np.ndarray) -> None:
    offset = 0
    for k in names:
        size = params[k].data.size
        params[k].data[...] = vec[offset:offset + size].reshape(params[k].shape)
        offset += size


def fit_lbfgs(params: dict, model_cfg: ModelConfig, split: DatasetSplit, cfg: TrainConfig):
    """Full-batch L-BFGS with the same early-stopping contract as fit().
    Each accepted step counts as one epoch in the history."""
    if cfg.optimizer != "lbfgs":
        raise ValueError("fit_lbfgs drives lbfgs; use fit for the adamw optimizer")
    x_tr, y_tr = split.train[0].values, split.train[1]
    x_va, y_va = split.val[0].values, split.val[1]
    _check_task(cfg.loss, y_tr)
    weights = _train_weights(y_tr, cfg.loss)
    names = list(params)
    rows = np.arange(x_tr.shape[0])

    def closure(vec):
        _write_vec(params, names, vec)
        for p in params.values():
            p.grad = None
        try:
            logits = forward(x_tr, params, model_cfg)
            loss = _loss_tensor(logits, y_tr, rows, weights)
        except ValueError:
            return np.inf, np.zeros_like(vec)  # poisoned probe; line search rejects it
        loss.backward()
        grad = np.concatenate([grad_or_zero(params[k]).ravel() for k in names])
        return float(loss.item()), grad

    stopper = EarlyStopper(cfg.patience)
    train_hist, val_hist, metric_hist = [], [], []
    state = {"stopped": False}

    def on_step(step, vec, f):
        _write_vec(params, names, vec)
        val_loss, val_metric = evaluate_loss_metric(params, model_cfg, x_va, y_va, weights)
        train_hist.append(f)
        val_hist.append(val_loss)
        metric_hist.append(val_metric)
        if stopper.update(step, val_loss, params):
            state["stopped"] = True
            return True
        return False

    lbfgs_minimize(
        closure,
        _read_vec(params, names),
        history=cfg.lbfgs.history,
        max_iters=cfg.max_epochs,
        grad_tol=cfg.lbfgs.tolerance,
        max_line_search=cfg.lbfgs.max_line_search,
        callback=on_step,
    )
    stopper.restore(params)
    best = stopper.best_epoch if train_hist else 0
    history = TrainHistory(train_hist, val_hist, metric_hist, best, state["stopped"])
    return params, history
