import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronids.errors import DataError, NumericalError
from kronids.evalbench import (
    MetricBundle,
    bench_latency,
    compare_models,
    confusion_and_metrics,
    emit_report,
    macro_f1,
    nearest_rank,
)
from kronids.numcore import SeededRng


class FakeClock:
    """Advances by the next scripted duration on every stop reading."""

    def __init__(self, durations):
        self.durations = itertools.cycle(durations)
        self.t = 0.0
        self.started = False

    def __call__(self):
        if self.started:
            self.t += next(self.durations)
        self.started = not self.started
        return self.t


def noop(X):
    return X


# ---------------------------------------------------------------- classification metrics


def test_two_class_fixture():
    m = confusion_and_metrics([1, 1, 0, 0], [1, 0, 0, 0], 2)
    assert m.confusion == [[2, 0], [1, 1]]
    assert m.precision == pytest.approx([2 / 3, 1.0])
    assert m.recall == pytest.approx([1.0, 0.5])
    assert m.f1 == pytest.approx([0.8, 2 / 3])
    assert m.macro_f1 == pytest.approx((0.8 + 2 / 3) / 2)
    assert m.macro_f1 == pytest.approx(0.7333, abs=1e-4)
    assert m.accuracy == 0.75
    # class 1 is the positive view: TN = 2, FP = 0
    assert m.binary_specificity == 1.0
    assert m.specificity == pytest.approx([0.5, 1.0])


def test_perfect_recall_with_false_positives():
    # every attack caught, some benign traffic flagged
    truth = [0, 0, 0, 0, 1, 1, 1]
    pred = [0, 0, 0, 1, 1, 1, 1]
    m = confusion_and_metrics(truth, pred, 2)
    assert m.recall[1] == 1.0
    assert m.binary_specificity == pytest.approx(0.75)
    assert m.binary_specificity < 1.0
    assert m.precision[1] == pytest.approx(0.75)


def test_three_class_fixture():
    truth = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    pred = [0, 0, 1, 1, 1, 2, 2, 0, 2]
    m = confusion_and_metrics(truth, pred, 3)
    assert m.confusion == [[2, 1, 0], [0, 2, 0], [1, 0, 3]]
    assert m.precision == pytest.approx([2 / 3, 2 / 3, 1.0])
    assert m.recall == pytest.approx([2 / 3, 1.0, 3 / 4])
    f1 = [2 / 3, 0.8, 6 / 7]
    assert m.f1 == pytest.approx(f1)
    assert m.macro_f1 == pytest.approx(sum(f1) / 3)
    # one-vs-rest: TN / (TN + FP) with FP per predicted column
    assert m.specificity == pytest.approx([5 / 6, 6 / 7, 5 / 5])
    assert m.binary_specificity is None
    assert m.accuracy == pytest.approx(7 / 9)


def test_perfect_predictions():
    y = [0, 1, 2, 2, 1]
    m = confusion_and_metrics(y, y, 3)
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0
    cm = np.array(m.confusion)
    assert not (cm - np.diag(np.diag(cm))).any()


def test_degenerate_predictor_warns_and_scores_zero():
    with pytest.warns(UserWarning, match="precision"):
        m = confusion_and_metrics([0, 0, 1, 1], [1, 1, 1, 1], 2)
    assert m.precision[0] == 0.0
    assert m.specificity[1] == 0.0


def test_absent_class_excluded_from_macro_f1():
    with pytest.warns(UserWarning, match="absent"):
        m = confusion_and_metrics([0, 0, 1], [0, 0, 1], 3)
    assert m.macro_f1 == 1.0


def test_empty_and_out_of_range_inputs():
    with pytest.raises(ValueError):
        confusion_and_metrics([], [], 2)
    with pytest.raises(ValueError):
        confusion_and_metrics([0, 3], [0, 1], 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 60), st.integers(0, 10_000))
def test_metric_invariants(C, n, seed):
    rng = SeededRng(seed)
    truth, pred = rng.integers(0, C, n), rng.integers(0, C, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = confusion_and_metrics(truth, pred, C)
        cm = np.array(m.confusion)
        assert cm.sum() == n
        assert m.accuracy == pytest.approx(np.trace(cm) / n)
        assert m.accuracy == pytest.approx(np.mean(truth == pred))
        for rates in (m.precision, m.recall, m.f1, m.specificity):
            assert all(0 <= r <= 1 for r in rates)
        perm = rng.permutation(C)
        assert macro_f1(perm[truth], perm[pred], C) == pytest.approx(m.macro_f1)


# ---------------------------------------------------------------- latency harness


def test_fixed_clock_two_ms():
    r = bench_latency(noop, np.zeros((1024, 4)), warmup=2, repeats=20, clock=FakeClock([0.002]))
    assert r["latency_mean_ms"] == pytest.approx(2.0)
    assert r["latency_p95_ms"] == pytest.approx(2.0)
    assert r["throughput_samples_per_s"] == pytest.approx(1024 / 0.002)


def test_p95_nearest_rank_on_1_to_100():
    d = [k / 1000 for k in range(1, 101)]
    r = bench_latency(noop, np.zeros((8, 1)), repeats=100, clock=FakeClock(d))
    assert r["latency_p95_ms"] == pytest.approx(95.0)
    assert r["latency_mean_ms"] == pytest.approx(50.5)
    assert r["latency_median_ms"] >= 0 and r["latency_p95_ms"] >= r["latency_median_ms"]
    assert nearest_rank(range(1, 101), 95) == 95


def test_nearest_rank_constant_series():
    assert nearest_rank([3.3] * 17, 95) == 3.3


def test_throughput_times_latency_is_batch_size():
    d = [0.010 + 1e-5 * (k % 3) for k in range(30)]
    r = bench_latency(noop, np.zeros((512, 2)), repeats=30, clock=FakeClock(d))
    assert r["throughput_samples_per_s"] * r["latency_mean_ms"] / 1e3 == pytest.approx(512, rel=0.05)


def test_zero_duration_retried_once_then_error():
    r = bench_latency(noop, np.zeros((4, 1)), repeats=20, clock=FakeClock([0.0, 0.001]))
    assert r["latency_mean_ms"] == pytest.approx(1.0)
    with pytest.raises(NumericalError):
        bench_latency(noop, np.zeros((4, 1)), repeats=20, clock=FakeClock([0.0]))


def test_bench_argument_checks():
    with pytest.raises(ValueError):
        bench_latency(noop, np.zeros((1, 1)), repeats=19)
    with pytest.raises(ValueError):
        bench_latency(noop, np.zeros((1, 1)), warmup=0)


def test_warmup_passes_are_untimed():
    calls = []
    r = bench_latency(lambda X: calls.append(1), np.zeros((2, 1)), warmup=3, repeats=20, clock=FakeClock([0.001]))
    assert len(calls) == 23 and len(r["durations_s"]) == 20


# ---------------------------------------------------------------- comparison and reports


def test_compare_models():
    a = MetricBundle(name="a", latency_mean_ms=2.0, model_kb=10.0)
    assert compare_models(a, a) == (1.0, 1.0)
    teacher = MetricBundle(name="t", latency_mean_ms=1.0, model_kb=3021.53)
    student = MetricBundle(name="s", latency_mean_ms=1.0, model_kb=22.29)
    assert compare_models(teacher, student)[1] == pytest.approx(135.6, abs=0.05)
    with pytest.raises(ZeroDivisionError):
        compare_models(a, MetricBundle(name="z", latency_mean_ms=0.0, model_kb=1.0))
    with pytest.raises(ValueError):
        compare_models(a, MetricBundle(name="x"))


def _bundles():
    a = confusion_and_metrics([0, 1, 1, 0], [0, 1, 0, 0], 2, "teacher")
    b = confusion_and_metrics([0, 1, 1, 0], [0, 1, 1, 0], 2, "student")
    for m, lat, kb in ((a, 4.0, 100.0), (b, 1.0, 2.0)):
        m.latency_mean_ms, m.latency_p95_ms, m.model_kb, m.model_params = lat, lat * 1.5, kb, 10
        m.throughput_samples_per_s = 1000 / lat
    b.speedup_vs_reference, b.compression_vs_reference = compare_models(a, b)
    return [a, b]


def test_emit_report_files_and_determinism(tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    for out in (out1, out2):
        out.mkdir()
        emit_report(_bundles(), {"seed": 0}, out, ["benign", "attack"])
    names = sorted(p.name for p in out1.iterdir())
    assert names == ["bench.csv", "confusion_student.csv", "confusion_teacher.csv", "metrics.json"]
    for n in names:
        assert (out1 / n).read_bytes() == (out2 / n).read_bytes()
    rows = (out1 / "bench.csv").read_text().strip().splitlines()
    assert rows[0] == "model,mean_ms,p95_ms,samples_per_s,params,kb,speedup,compression"
    assert len(rows) == 3
    conf = [line.split(",") for line in (out1 / "confusion_teacher.csv").read_text().strip().splitlines()[1:]]
    assert [sum(map(int, r[1:])) for r in conf] == [2, 2]
    data = json.loads((out1 / "metrics.json").read_text())
    assert data["models"]["student"]["compression_vs_reference"] == 50.0
    assert data["meta"] == {"seed": 0}


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        emit_report(_bundles(), {}, blocker / "sub", ["a", "b"])
