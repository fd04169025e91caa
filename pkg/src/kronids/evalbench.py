"""Classification metrics and the latency/throughput harness."""
from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, NumericalError


@dataclass
class MetricBundle:
    name: str = "model"
    confusion: list[list[int]] = field(default_factory=list)
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    specificity: list[float] = field(default_factory=list)
    binary_specificity: float | None = None
    latency_mean_ms: float | None = None
    latency_p95_ms: float | None = None
    latency_median_ms: float | None = None
    throughput_samples_per_s: float | None = None
    per_sample_latency_us: float | None = None
    model_params: int | None = None
    model_kb: float | None = None
    speedup_vs_reference: float | None = None
    compression_vs_reference: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(num: np.ndarray, den: np.ndarray, what: str) -> np.ndarray:
    zero = den == 0
    if np.any(zero):
        warnings.warn(f"{what} undefined for classes {np.flatnonzero(zero).tolist()}; reported as 0")
    return np.where(zero, 0.0, num / np.where(zero, 1, den))


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and predictions {pred.shape} differ in length")
    for lab, what in ((truth, "truth"), (pred, "prediction")):
        if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise ValueError(f"{what} labels outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def confusion_and_metrics(truth, pred, n_classes: int, name: str = "model") -> MetricBundle:
    """Confusion matrix (rows = truth) and per-class / macro scores.

    Classes absent from ``truth`` are left out of macro-F1. Zero
    denominators give 0 with a warning.
    """
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("cannot score an empty prediction set")
    cm = confusion_matrix(truth, pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    precision = _safe_div(tp, tp + fp, "precision")
    recall = _safe_div(tp, tp + fn, "recall")
    f1 = _safe_div(2 * precision * recall, precision + recall, "F1")
    specificity = _safe_div(tn, tn + fp, "specificity")
    present = cm.sum(axis=1) > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} absent from truth; excluded from macro-F1")
    return MetricBundle(
        name=name,
        confusion=cm.tolist(),
        accuracy=float(tp.sum() / cm.sum()),
        macro_f1=float(f1[present].mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        specificity=specificity.tolist(),
        # binary view: class 0 is benign, class 1 the positive (attack) class
        binary_specificity=float(specificity[1]) if n_classes == 2 else None,
    )


def macro_f1(truth, pred, n_classes: int) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return confusion_and_metrics(truth, pred, n_classes).macro_f1


def nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty series")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def bench_latency(
    forward: Callable[[np.ndarray], object],
    X: np.ndarray,
    warmup: int = 5,
    repeats: int = 50,
    clock: Callable[[], float] = time.perf_counter,
    single_thread: bool = True,
) -> dict:
    """Time ``repeats`` forward passes over the batch ``X`` after ``warmup`` untimed ones.

    Returns per-pass mean, median and nearest-rank p95 latency in ms, and
    throughput as total samples over total timed seconds. BLAS is pinned
    to one thread for the timed region unless ``single_thread`` is False.
    """
    if repeats < 20:
        raise ValueError("repeats must be >= 20")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    n = len(X)
    durations = []
    ctx = _single_thread() if single_thread else None
    if ctx is not None:
        ctx.__enter__()
    try:
        for _ in range(warmup):
            forward(X)
        for _ in range(repeats):
            for attempt in range(2):
                t0 = clock()
                forward(X)
                dt = clock() - t0
                if dt > 0:
                    break
            else:
                raise NumericalError("clock reported a non-positive duration twice in a row")
            durations.append(dt)
    finally:
        if ctx is not None:
            ctx.__exit__(None, None, None)
    d = np.asarray(durations)
    total = float(d.sum())
    return {
        "batch_size": n,
        "repeats": repeats,
        "durations_s": d.tolist(),
        "latency_mean_ms": float(d.mean() * 1e3),
        "latency_median_ms": nearest_rank(d * 1e3, 50),
        "latency_p95_ms": nearest_rank(d * 1e3, 95),
        "throughput_samples_per_s": n * repeats / total,
        "per_sample_latency_us": total / (n * repeats) * 1e6,
    }


def compare_models(reference: MetricBundle, candidate: MetricBundle) -> tuple[float, float]:
    """(speedup, compression) of ``candidate`` relative to ``reference``."""
    for b in (reference, candidate):
        if b.latency_mean_ms is None or b.model_kb is None:
            raise ValueError(f"bundle {b.name!r} lacks latency or size")
    if candidate.latency_mean_ms == 0 or candidate.model_kb == 0:
        raise ZeroDivisionError(f"bundle {candidate.name!r} has zero latency or size")
    return (
        reference.latency_mean_ms / candidate.latency_mean_ms,
        reference.model_kb / candidate.model_kb,
    )


BENCH_FIELDS = ["model", "mean_ms", "p95_ms", "samples_per_s", "params", "kb", "speedup", "compression"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_confusion_csv(path, confusion, class_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred", *class_names])
        for name, row in zip(class_names, confusion):
            w.writerow([name, *row])


def write_bench_csv(path, bundles) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for b in bundles:
            w.writerow(
                [
                    b.name,
                    _fmt(b.latency_mean_ms),
                    _fmt(b.latency_p95_ms),
                    _fmt(b.throughput_samples_per_s),
                    _fmt(b.model_params),
                    _fmt(b.model_kb),
                    _fmt(b.speedup_vs_reference),
                    _fmt(b.compression_vs_reference),
                ]
            )


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def emit_report(
    bundles: list[MetricBundle],
    meta: dict,
    out_dir,
    class_names: list[str] | None = None,
    parts=("metrics", "confusion", "bench"),
) -> list[str]:
    """Write ``metrics.json``, ``confusion_<name>.csv`` and ``bench.csv``.

    Output is a pure function of the inputs: same bundles and metadata give
    byte-identical files. Returns the written paths.
    """
    if not bundles:
        raise ValueError("emit_report needs at least one bundle")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    try:
        if "metrics" in parts:
            path = os.path.join(out_dir, "metrics.json")
            write_json(path, {"meta": meta, "models": {b.name: b.to_dict() for b in bundles}})
            written.append(path)
        if "confusion" in parts:
            for b in bundles:
                names = class_names or [str(i) for i in range(len(b.confusion))]
                path = os.path.join(out_dir, f"confusion_{b.name}.csv")
                write_confusion_csv(path, b.confusion, names)
                written.append(path)
        if "bench" in parts:
            path = os.path.join(out_dir, "bench.csv")
            write_bench_csv(path, bundles)
            written.append(path)
    except OSError as exc:
        raise DataError(f"cannot write report into {out_dir}: {exc}") from exc
    return written
