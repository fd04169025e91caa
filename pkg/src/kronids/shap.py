"""Shapley attributions, global feature ranking and the top-K ablation.

Value function: ``v(S)`` is the mean over a background set of ``f`` applied
to ``x`` with the features outside ``S`` replaced by background values
(interventional masking).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numcore import SeededRng

log = logging.getLogger(__name__)

MAX_EXACT_P = 12
RIDGE = 1e-8

# f: (n, p) inputs -> (n,) outputs
ValueFn = Callable[[np.ndarray], np.ndarray]


def _coalition_values(f: ValueFn, x: np.ndarray, background: np.ndarray, masks: np.ndarray, chunk: int = 1 << 16):
    """v(S) for every boolean row of ``masks``; True marks features taken from ``x``."""
    nb = len(background)
    per = max(1, chunk // nb)
    out = np.empty(len(masks), dtype=np.float64)
    for s in range(0, len(masks), per):
        m = masks[s : s + per]
        rows = np.where(m[:, None, :], x[None, None, :], background[None, :, :])
        vals = np.asarray(f(rows.reshape(-1, x.shape[0])), dtype=np.float64)
        out[s : s + per] = vals.reshape(len(m), nb).mean(axis=1)
    return out


def all_masks(p: int) -> np.ndarray:
    """All 2^p coalitions; row i has feature j present iff bit j of i is set."""
    ids = np.arange(2**p)[:, None]
    return ((ids >> np.arange(p)) & 1).astype(bool)


def exact_shapley(f: ValueFn, x, background) -> np.ndarray:
    """Brute-force Shapley values over all 2^p coalitions (p <= 12)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    p = x.size
    if p > MAX_EXACT_P:
        raise ValueError(f"exact enumeration is limited to p <= {MAX_EXACT_P}, got {p}; use kernel_shap")
    masks = all_masks(p)
    v = _coalition_values(f, x, background, masks)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(k) for k in range(p + 1)]
    phi = np.zeros(p)
    ids = np.arange(2**p)
    for j in range(p):
        without = ids[~masks[:, j]]
        s = sizes[without]
        w = np.array([fact[k] * fact[p - k - 1] for k in s], dtype=np.float64) / fact[p]
        phi[j] = np.sum(w * (v[without | (1 << j)] - v[without]))
    return phi


def shapley_kernel_weight(p: int, size: int) -> float:
    """Kernel weight (p-1) / (C(p,|S|) |S| (p-|S|)) of one coalition of ``size``."""
    return (p - 1) / (math.comb(p, size) * size * (p - size))


def _sample_masks(p: int, n: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Coalitions drawn with probability proportional to the kernel, in complementary pairs.

    Returns masks and their (equal) regression weights.
    """
    sizes = np.arange(1, p)
    size_mass = np.array([(p - 1) / (k * (p - k)) for k in sizes])
    size_mass /= size_mass.sum()
    half = (n + 1) // 2
    ks = rng.choice(sizes, size=half, p=size_mass)
    masks = np.zeros((2 * half, p), dtype=bool)
    for i, k in enumerate(ks):
        chosen = rng.choice(p, size=k, replace=False)
        masks[2 * i, chosen] = True
        masks[2 * i + 1] = ~masks[2 * i]
    masks = masks[:n]
    return masks, np.full(n, 1.0 / n)


def kernel_shap(
    f: ValueFn,
    x,
    background,
    n_coalitions: int | None = None,
    rng: SeededRng | None = None,
) -> np.ndarray:
    """KernelSHAP estimate with the efficiency constraint imposed exactly.

    When ``n_coalitions >= 2^p`` every proper coalition is enumerated with
    its exact kernel weight, which reproduces the Shapley values. Otherwise
    coalitions are sampled in complementary pairs. The empty and full
    coalitions enter as equality constraints, eliminated by substitution.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if len(background) == 0:
        raise ValueError("background set is empty")
    p = x.size
    if n_coalitions is None:
        n_coalitions = 2**p if p <= MAX_EXACT_P else 2 * p + 2048
    if n_coalitions < p + 2:
        raise ValueError(f"n_coalitions must be >= p + 2 = {p + 2}")
    if p == 1:
        ends = _coalition_values(f, x, background, np.array([[False], [True]]))
        return np.array([ends[1] - ends[0]])
    ends = _coalition_values(f, x, background, np.array([[False] * p, [True] * p]))
    v0, v1 = ends
    delta = v1 - v0
    if n_coalitions >= 2**p:
        masks = all_masks(p)[1:-1]
        weights = np.array([shapley_kernel_weight(p, k) for k in masks.sum(axis=1)])
    else:
        masks, weights = _sample_masks(p, n_coalitions - 2, rng or SeededRng(0))
    y = _coalition_values(f, x, background, masks) - v0
    Z = masks.astype(np.float64)
    # phi_last = delta - sum(other phi): y - z_last*delta = (z_j - z_last) phi_j
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * delta
    Aw = A * weights[:, None]
    M = A.T @ Aw
    rhs = Aw.T @ b
    try:
        if np.linalg.cond(M) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        head = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("KernelSHAP regression is singular; applying ridge 1e-8")
        head = np.linalg.solve(M + RIDGE * np.eye(p - 1), rhs)
    return np.append(head, delta - head.sum())


# ---------------------------------------------------------------- model glue


def logit_value_fn(model, cls: int, use_probability: bool = False) -> ValueFn:
    """Scalar output of ``model`` for class ``cls`` (logit, or softmax probability)."""
    from .numcore import softmax

    def f(X):
        z = model.predict_logits(X, batch_size=1 << 15).astype(np.float64)
        return softmax(z)[:, cls] if use_probability else z[:, cls]

    return f


def explain_model(
    model,
    X_explain: np.ndarray,
    background: np.ndarray,
    n_coalitions: int | None = None,
    seed: int = 0,
    use_probability: bool = False,
    n_jobs: int = 1,
) -> np.ndarray:
    """SHAP matrix (rows of ``X_explain`` x p) for each row's predicted class."""
    preds = model.predict(X_explain)
    root = SeededRng(seed)

    def one(i):
        f = logit_value_fn(model, int(preds[i]), use_probability)
        return kernel_shap(f, X_explain[i], background, n_coalitions, root.spawn(i))

    idx = range(len(X_explain))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(one, idx))
    else:
        rows = [one(i) for i in idx]
    return np.stack(rows) if rows else np.zeros((0, X_explain.shape[1]))


# ---------------------------------------------------------------- ranking


@dataclass
class AttributionReport:
    phi: np.ndarray
    s: np.ndarray
    pi: np.ndarray
    cumulative: np.ndarray
    chosen_k: int | None = None
    mass_k: int | None = None
    feature_names: list[str] = field(default_factory=list)
    feature_sources: list[str] = field(default_factory=list)

    def source_importance(self) -> list[tuple[str, float]]:
        """Importance summed over one-hot blocks of the same source column."""
        totals: dict[str, float] = {}
        for src, val in zip(self.feature_sources, self.s):
            totals[src] = totals.get(src, 0.0) + float(val)
        return sorted(totals.items(), key=lambda kv: -kv[1])

    def write_global_csv(self, path) -> None:
        names = self.feature_sources or [str(j) for j in range(len(self.s))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "column", "source_feature", "s", "cumulative"])
            for r, j in enumerate(self.pi):
                w.writerow([r + 1, int(j), names[j], repr(float(self.s[j])), repr(float(self.cumulative[r]))])


def global_ranking(phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s, pi, cumulative): mean |phi| per column, descending order, normalized running sum.

    Ties are broken by ascending column index.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.size == 0:
        raise ValueError("phi is empty")
    s = np.abs(phi).mean(axis=0)
    pi = np.argsort(-s, kind="stable")
    total = s.sum()
    if total == 0:
        warnings.warn("all attributions are zero; cumulative curve set to zero")
        return s, pi, np.zeros_like(s)
    cumulative = np.cumsum(s[pi]) / total
    return s, pi, cumulative


def mass_cutoff(cumulative: np.ndarray, mass: float = 0.95) -> int:
    """Smallest K whose top-K features hold at least ``mass`` of total importance."""
    hit = np.flatnonzero(cumulative >= mass - 1e-12)
    return int(hit[0] + 1) if hit.size else len(cumulative)


def attribution_sampling_plan(y, n_samples: int, rng: SeededRng | None = None) -> np.ndarray:
    """Sorted row indices of a class-stratified sample of size ``n_samples``.

    Every class with rows gets at least one slot (while slots remain); the
    rest are allocated proportionally by largest remainder.
    """
    y = np.asarray(y)
    n = len(y)
    if n_samples > n:
        raise ValueError(f"cannot sample {n_samples} of {n} rows")
    if n_samples == n:
        return np.arange(n)
    rng = rng or SeededRng(0)
    classes, counts = np.unique(y, return_counts=True)
    alloc = np.zeros(len(classes), dtype=np.int64)
    by_size = np.argsort(counts, kind="stable")
    for i in by_size[:n_samples]:
        alloc[i] = 1
    left = n_samples - alloc.sum()
    while left > 0:
        room = counts - alloc
        share = room / room.sum() * left
        add = np.minimum(np.floor(share).astype(np.int64), room)
        if add.sum() == 0:
            add[np.argmax(share - add)] += 1
        alloc += add
        left = n_samples - alloc.sum()
    picks = [rng.choice(np.flatnonzero(y == c), size=k, replace=False) for c, k in zip(classes, alloc) if k]
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    full_f1: float
    per_k: list[tuple[int, float]]
    selected_k: int
    met_tolerance: bool
    tolerance: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", "val_macro_f1", "delta_vs_full", "selected"])
            for k, f1 in self.per_k:
                w.writerow([k, repr(f1), repr(self.full_f1 - f1), int(k == self.selected_k)])


def ablate_k(
    train_probe: Callable[[np.ndarray], float],
    pi,
    k_grid=(32, 64, 96, 128),
    tolerance: float = 0.02,
    full_f1: float | None = None,
) -> AblationResult:
    """Smallest K in ``k_grid`` whose probe F1 is within ``tolerance`` of the full model.

    ``train_probe(columns)`` trains a fresh model on those columns and
    returns its validation macro-F1. Grid values above p are skipped; when
    none remain, K = p is tried. If no K qualifies the largest is returned
    with ``met_tolerance=False``.
    """
    pi = np.asarray(pi)
    p = len(pi)
    ks = sorted({int(k) for k in k_grid if 0 < k <= p})
    if len(ks) < len(set(k_grid)):
        warnings.warn(f"K values above p={p} skipped: {sorted(k for k in set(k_grid) if k > p)}")
    if not ks:
        ks = [p]
    if full_f1 is None:
        full_f1 = float(train_probe(np.arange(p)))
    per_k = []
    for k in ks:
        f1 = float(train_probe(pi[:k]))
        per_k.append((k, f1))
        log.info("ablation K=%d val macro-F1 %.4f (full %.4f)", k, f1, full_f1)
    ok = [k for k, f1 in per_k if full_f1 - f1 <= tolerance]
    if ok:
        return AblationResult(full_f1, per_k, ok[0], True, tolerance)
    return AblationResult(full_f1, per_k, ks[-1], False, tolerance)
