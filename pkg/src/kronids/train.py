"""Losses, AdamW, learning-rate schedules, early stopping and distillation."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, ShapeError
from .evalbench import macro_f1
from .numcore import SeededRng, derive_seed, log_softmax, softmax

log = logging.getLogger(__name__)

# (logits, batch row indices) -> (scalar loss, dloss/dlogits)
LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class TrainConfig:
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 50
    patience: int = 8
    dropout: float = 0.3
    scheduler: str = "cosine"
    step_size: int = 10
    gamma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs and patience must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.patience > self.epochs:
            raise ValueError(f"patience {self.patience} exceeds epochs {self.epochs}")
        if self.scheduler not in ("cosine", "step"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class DistillConfig:
    temperatures: tuple[float, ...] = (2.0, 3.0, 4.0)
    alphas: tuple[float, ...] = (0.5, 0.7, 0.9)
    n_jobs: int = 1

    def __post_init__(self):
        if not self.temperatures or not self.alphas:
            raise ValueError("distillation grid must be nonempty")
        if any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alphas must lie in [0, 1]")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_macro_f1: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_macro_f1: float = float("-inf")
    stopped_epoch: int = 0
    wall_clock_s: float = 0.0
    grid: list[dict] = field(default_factory=list)
    chosen: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses


def class_weights(class_counts) -> np.ndarray:
    """Balanced inverse-frequency weights ``N / (C * N_c)``."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one row, got counts {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


def weighted_ce(logits: np.ndarray, labels: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ``w_y * -log softmax(z)_y`` and its gradient wrt ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or len(w) != c:
        raise ShapeError(f"logits {logits.shape}, labels {labels.shape}, weights {len(w)} do not conform")
    logp = log_softmax(logits)
    rows = np.arange(n)
    wy = np.asarray(w, dtype=logits.dtype)[labels]
    loss = float(np.mean(-wy * logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad *= (wy / n)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


def kd_loss(z_s: np.ndarray, z_t: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """``T^2 KL(softmax(z_t/T) || softmax(z_s/T))`` (batch mean) and gradient wrt ``z_s``."""
    z_s = np.asarray(z_s)
    z_t = np.asarray(z_t)
    if z_s.shape != z_t.shape:
        raise ShapeError(f"student logits {z_s.shape} != teacher logits {z_t.shape}")
    T = float(temperature)
    if not T > 0:
        raise ValueError("temperature must be positive")
    n = z_s.shape[0]
    lt = log_softmax(z_t, T)
    ls = log_softmax(z_s, T)
    pt = np.exp(lt)
    kl = np.sum(pt * (lt - ls), axis=1)
    loss = float(T * T * kl.mean())
    grad = (T / n) * (np.exp(ls) - pt)
    return loss, grad.astype(z_s.dtype, copy=False)


def total_loss(ce: float, kd: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * ce + alpha * kd


def ce_provider(y: np.ndarray, w: np.ndarray) -> LossFn:
    def fn(logits, idx):
        return weighted_ce(logits, y[idx], w)

    return fn


def distill_provider(y: np.ndarray, w: np.ndarray, teacher_logits: np.ndarray, T: float, alpha: float) -> LossFn:
    """Loss ``(1-a) CE + a KD``; the KD term is skipped entirely at ``alpha == 0``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")

    def fn(logits, idx):
        ce, g_ce = weighted_ce(logits, y[idx], w)
        if alpha == 0.0:
            return ce, g_ce
        kd, g_kd = kd_loss(logits, teacher_logits[idx], T)
        if alpha == 1.0:
            return kd, g_kd
        return total_loss(ce, kd, alpha), (1 - alpha) * g_ce + alpha * g_kd

    return fn


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay (decay applied before the Adam step)."""

    def __init__(self, model, lr=1e-3, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self) -> None:
        self.t += 1
        b1, b2, lr = self.b1, self.b2, self.lr
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for i, (layer, name) in enumerate(self.model.parameters()):
            p = layer.params[name]
            g = layer.grads[name]
            if i not in self.m:
                self.m[i] = np.zeros_like(p)
                self.v[i] = np.zeros_like(p)
            m = self.m[i] = b1 * self.m[i] + (1 - b1) * g
            v = self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            if self.weight_decay:
                p = p * (1 - lr * self.weight_decay)
            layer.params[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """``0.5 * lr * (1 + cos(pi * epoch / epochs))``; epoch counts from 0."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))


def step_lr(base_lr: float, epoch: int, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (epoch // step_size)


def scheduled_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler == "cosine":
        return cosine_lr(cfg.lr, epoch, cfg.epochs)
    return step_lr(cfg.lr, epoch, cfg.step_size, cfg.gamma)


# ---------------------------------------------------------------- training


def fit(
    model,
    X_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    n_classes: int,
    cfg: TrainConfig,
    loss_fn: LossFn,
) -> TrainReport:
    """Minibatch AdamW with per-epoch validation macro-F1 and early stopping.

    ``loss_fn`` receives the batch logits and the training-row indices of
    the batch. The model is left in eval mode holding the best-epoch
    weights. Epochs in the report are numbered from 1.
    """
    if X_train.shape[1] != model.in_dim or model.out_dim != n_classes:
        raise ShapeError(
            f"model maps {model.in_dim} -> {model.out_dim} but data has {X_train.shape[1]} columns, {n_classes} classes"
        )
    t_start = time.perf_counter()
    rng = SeededRng(cfg.seed)
    model.reseed(derive_seed(cfg.seed, 1))
    opt = AdamW(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    X_train = np.asarray(X_train, dtype=model.dtype)
    n = len(X_train)
    report = TrainReport()
    best_state = model.state()
    since_best = 0
    for epoch in range(cfg.epochs):
        opt.lr = scheduled_lr(cfg, epoch)
        model.train()
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            logits = model.forward(X_train[idx])
            loss, grad = loss_fn(logits, idx)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            model.backward(grad)
            opt.step()
            losses.append(loss * len(idx))
        model.eval()
        f1 = macro_f1(y_val, model.predict(X_val), n_classes)
        report.train_loss.append(float(np.sum(losses) / n))
        report.val_macro_f1.append(float(f1))
        report.lrs.append(opt.lr)
        log.debug("epoch %d loss %.5f val macro-F1 %.5f", epoch + 1, report.train_loss[-1], f1)
        if f1 > report.best_val_macro_f1:
            report.best_val_macro_f1 = float(f1)
            report.best_epoch = epoch + 1
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    report.stopped_epoch = len(report.val_macro_f1)
    model.load_state(best_state)
    model.eval()
    report.wall_clock_s = time.perf_counter() - t_start
    return report


def _cell_seed(seed: int, T: float, alpha: float) -> int:
    return derive_seed(seed, round(T * 1000), round(alpha * 1000))


def distill(
    teacher,
    build_student: Callable[[int], object],
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    top_k: np.ndarray,
    n_classes: int,
    grid: DistillConfig,
    cfg: TrainConfig,
):
    """Train one student per (T, alpha) cell and keep the best by validation macro-F1.

    Teacher logits are computed once, in eval mode, on the full-width
    inputs; students only see the ``top_k`` columns. ``build_student`` is
    called with a per-cell seed. Returns ``(report, best_student, cells)``
    where ``cells`` maps (T, alpha) to (TrainReport, student).
    """
    top_k = np.asarray(top_k, dtype=np.int64)
    if top_k.size == 0 or top_k.min() < 0 or top_k.max() >= X_train.shape[1]:
        raise ShapeError("top-K indices must be valid input columns")
    t_start = time.perf_counter()
    teacher_logits = teacher.predict_logits(X_train).astype(np.float64)
    w = class_weights(np.bincount(y_train, minlength=n_classes).clip(min=1))
    Xs_train = np.ascontiguousarray(X_train[:, top_k])
    Xs_val = np.ascontiguousarray(X_val[:, top_k])
    keys = [(float(T), float(a)) for T in grid.temperatures for a in grid.alphas]

    def run_cell(key):
        T, a = key
        seed = _cell_seed(cfg.seed, T, a)
        student = build_student(seed)
        zt = teacher_logits.astype(student.dtype)
        cell_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
        rep = fit(student, Xs_train, Xs_val, y_val, n_classes, cell_cfg, distill_provider(y_train, w, zt, T, a))
        return rep, student

    if grid.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=grid.n_jobs) as pool:
            results = list(pool.map(run_cell, keys))
    else:
        results = [run_cell(k) for k in keys]
    cells = dict(zip(keys, results))

    best_key = max(keys, key=lambda k: (cells[k][0].best_val_macro_f1, -keys.index(k)))
    report = TrainReport()
    for k in keys:
        rep = cells[k][0]
        report.grid.append(
            {"T": k[0], "alpha": k[1], "val_macro_f1": rep.best_val_macro_f1, "chosen": k == best_key}
        )
    best_rep, best_student = cells[best_key]
    report.chosen = {"T": best_key[0], "alpha": best_key[1]}
    report.train_loss = best_rep.train_loss
    report.val_macro_f1 = best_rep.val_macro_f1
    report.lrs = best_rep.lrs
    report.best_epoch = best_rep.best_epoch
    report.best_val_macro_f1 = best_rep.best_val_macro_f1
    report.stopped_epoch = best_rep.stopped_epoch
    report.wall_clock_s = time.perf_counter() - t_start
    return report, best_student, cells
