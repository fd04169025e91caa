"""End-to-end acceptance checks; each test states one criterion and prints a PASS/FAIL line.

The pipeline criteria share two ``run-all`` executions of the shipped
desk-scale preset (``configs/desk_heavy_tail.json``), made once per module.
"""
import csv
import json
import math
import os
import time

import numpy as np
import pytest

from kronids.cli import main
from kronids.evalbench import bench_latency, confusion_and_metrics
from kronids.nn import KronFactors, build_teacher, kron_backward, kron_forward, load_model
from kronids.numcore import F64, SeededRng, grad_check, kron_dense
from kronids.quant import quantize_tensor
from kronids.shap import exact_shapley, kernel_shap, logit_value_fn
from kronids.train import kd_loss, total_loss, weighted_ce

CONFIG = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "desk_heavy_tail.json")
# wall-clock outputs; see the determinism test
MEASURED = {"bench.csv", "bench.json", "timings.json"}


def verdict(record_property, name, ok, detail):
    record_property("criterion", name)
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out, seconds = [], []
    for tag in ("a", "b"):
        d = str(root / tag)
        t = time.perf_counter()
        code = main(["run-all", "--config", CONFIG, "--out", d])
        seconds.append(time.perf_counter() - t)
        assert code == 0
        out.append(d)
    return out, seconds


def load_json(run_dir, name):
    with open(os.path.join(run_dir, name)) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- 1


def test_criterion_1_kronecker_correctness(record_property):
    t = time.perf_counter()
    rng = SeededRng(2024)
    fwd_err, grad_err = 0.0, 0.0
    for _ in range(200):
        a1, a2, b1, b2 = (int(v) for v in rng.integers(1, 7, 4))
        f = KronFactors(rng.normal(size=(a1, a2)), rng.normal(size=(b1, b2)), rng.normal(size=a1 * b1))
        X = rng.normal(size=(int(rng.integers(1, 5)), a2 * b2))
        dense = X @ kron_dense(f.A, f.B).T + f.bias
        fwd_err = max(fwd_err, float(np.max(np.abs(kron_forward(f, X) - dense))))
    for _ in range(10):
        a1, a2, b1, b2 = (int(v) for v in rng.integers(1, 5, 4))
        f = KronFactors(rng.normal(size=(a1, a2)), rng.normal(size=(b1, b2)), rng.normal(size=a1 * b1))
        X, R = rng.normal(size=(3, a2 * b2)), rng.normal(size=(3, a1 * b1))
        dA, dB, db, dX = kron_backward(f, X, R)

        def loss(A=f.A, B=f.B, b=f.bias, x=X):
            return float(np.sum(kron_forward(KronFactors(A, B, b), x) * R))

        grad_err = max(
            grad_err,
            grad_check(lambda A: loss(A=A), f.A, dA),
            grad_check(lambda B: loss(B=B), f.B, dB),
            grad_check(lambda b: loss(b=b), f.bias, db),
            grad_check(lambda x: loss(x=x), X, dX),
        )
    secs = time.perf_counter() - t
    ok = fwd_err <= 1e-10 and grad_err < 1e-6 and secs < 30
    verdict(record_property, "1 kronecker", ok,
            f"max forward err {fwd_err:.2e} (<=1e-10), max grad rel err {grad_err:.2e} (<1e-6), {secs:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_loss_correctness(record_property):
    t = time.perf_counter()
    rng = SeededRng(7)
    z, zt = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y, w = rng.integers(0, 4, 6), np.array([0.5, 1.0, 2.0, 3.0])
    _, g_ce = weighted_ce(z, y, w)
    ce_err = grad_check(lambda v: weighted_ce(v, y, w)[0], z, g_ce)
    kd_err = 0.0
    for T in (1.0, 2.0, 3.0, 4.0):
        _, g_kd = kd_loss(z, zt, T)
        kd_err = max(kd_err, grad_check(lambda v: kd_loss(v, zt, T)[0], z, g_kd))
    self_kd = max(kd_loss(z, z, T)[0] for T in (0.5, 1.0, 3.0, 10.0))
    ce, kd = weighted_ce(z, y, w)[0], kd_loss(z, zt, 3.0)[0]
    ends = total_loss(ce, kd, 0.0) == ce and total_loss(ce, kd, 1.0) == kd
    secs = time.perf_counter() - t
    ok = ce_err < 1e-4 and kd_err < 1e-4 and self_kd == 0.0 and ends and secs < 10
    verdict(record_property, "2 losses", ok,
            f"CE grad err {ce_err:.1e}, KD grad err {kd_err:.1e}, kd(z,z)={self_kd}, alpha endpoints exact={ends}")


# ---------------------------------------------------------------- 3


def test_criterion_3_shap_fidelity(record_property):
    t = time.perf_counter()
    rng = SeededRng(11)
    agree = 0.0
    for p in (2, 4, 6, 8, 10):
        model = build_teacher(p, 3, dropout_rate=0.0, hidden=(8, 6, 4), seed=p, dtype=F64).eval()
        x, bg = rng.normal(size=p), rng.normal(size=(6, p))
        f = logit_value_fn(model, int(rng.integers(0, 3)))
        agree = max(agree, float(np.max(np.abs(kernel_shap(f, x, bg, 2**p) - exact_shapley(f, x, bg)))))
    # efficiency on a sampled estimate
    p = 12
    model = build_teacher(p, 3, hidden=(8, 6, 4), seed=1, dtype=F64).eval()
    f = logit_value_fn(model, 0)
    x, bg = rng.normal(size=p), rng.normal(size=(5, p))
    phi = kernel_shap(f, x, bg, 300, SeededRng(1))
    eff = abs(phi.sum() - (f(x[None])[0] - f(bg).mean()))
    # dummy and symmetry with the exact oracle and the enumerated estimator
    g = lambda X: np.tanh(X[:, 0] + X[:, 1]) * X[:, 3]
    x = rng.normal(size=5)
    x[1] = x[0]
    bg = rng.normal(size=(4, 5))
    bg[:, 1] = bg[:, 0]
    ex, ks = exact_shapley(g, x, bg), kernel_shap(g, x, bg, 32)
    dummy = max(abs(ex[2]), abs(ex[4]))
    sym_exact, sym_kernel = abs(ex[0] - ex[1]), abs(ks[0] - ks[1])
    # linear closed form
    wv = rng.normal(size=9)
    x, bg = rng.normal(size=9), rng.normal(size=(20, 9))
    lin = float(np.max(np.abs(kernel_shap(lambda X: X @ wv + 2.0, x, bg) - wv * (x - bg.mean(axis=0)))))
    secs = time.perf_counter() - t
    ok = agree <= 1e-6 and eff <= 1e-8 and dummy <= 1e-10 and sym_exact <= 1e-8 and sym_kernel <= 1e-4 and lin <= 1e-10
    ok = ok and secs < 120
    verdict(record_property, "3 shap", ok,
            f"kernel-vs-exact {agree:.1e}, efficiency {eff:.1e}, dummy {dummy:.1e}, "
            f"symmetry {sym_exact:.1e}/{sym_kernel:.1e}, linear {lin:.1e}")


# ---------------------------------------------------------------- 4


def test_criterion_4_pipeline_reproduction(runs, record_property):
    (run, _), (secs, _) = runs
    teacher_val = load_json(run, "manifest.json")["steps"]["train-teacher"]["info"]["val_macro_f1"]
    m = load_json(run, "metrics.json")
    t_f1 = m["models"]["teacher"]["macro_f1"]
    s_f1 = m["models"]["student_fp32"]["macro_f1"]
    gap = t_f1 - s_f1
    comp = m["models"]["teacher"]["model_params"] / m["models"]["student_fp32"]["model_params"]
    ok = teacher_val >= 0.95 and gap <= 0.02 and comp >= 100 and secs < 15 * 60
    verdict(record_property, "4 pipeline", ok,
            f"teacher val F1 {teacher_val:.4f} (>=0.95), test F1 teacher {t_f1:.4f} student {s_f1:.4f} "
            f"gap {gap:.4f} (<=0.02), params {comp:.0f}x (>=100), {secs:.0f}s")


# ---------------------------------------------------------------- 5


def test_criterion_5_quantization_parity(runs, record_property):
    (run, _), _ = runs
    t = time.perf_counter()
    m = load_json(run, "metrics.json")
    fp, q8 = m["models"]["student_fp32"], m["models"]["student_int8"]
    d_acc, d_f1 = q8["accuracy"] - fp["accuracy"], q8["macro_f1"] - fp["macro_f1"]
    n32 = os.path.getsize(os.path.join(run, "student_fp32.kids"))
    n8 = os.path.getsize(os.path.join(run, "student_int8.kids"))
    fp_model = load_model(os.path.join(run, "student_fp32.kids"))
    worst = 0.0
    for layer in fp_model.layers:
        if layer.kind in ("dense", "kron"):
            for w in layer.params.values():
                qt = quantize_tensor(w)
                err = np.abs(qt.dequantize().astype(np.float64) - w.astype(np.float64))
                worst = max(worst, float(np.max(err / (qt.scale / 2))))
    secs = time.perf_counter() - t
    ok = abs(d_acc) <= 0.005 and abs(d_f1) <= 0.01 and n8 < n32 and worst <= 1.0 + 1e-6
    verdict(record_property, "5 quantization", ok,
            f"delta acc {d_acc:+.4f}, delta F1 {d_f1:+.4f}, files {n8} < {n32} bytes, "
            f"max dequant err {worst:.3f} x scale/2, {secs:.1f}s")


# ---------------------------------------------------------------- 6


class _Clock:
    def __init__(self, durations):
        self.d, self.i, self.t, self.open = durations, 0, 0.0, False

    def __call__(self):
        if self.open:
            self.t += self.d[self.i % len(self.d)]
            self.i += 1
        self.open = not self.open
        return self.t


def test_criterion_6_benchmark_harness(runs, record_property):
    (run, _), _ = runs
    noop = lambda X: X
    fixed = bench_latency(noop, np.zeros((1024, 2)), 1, 20, clock=_Clock([0.002]))
    ramp = bench_latency(noop, np.zeros((8, 2)), 1, 100, clock=_Clock([k / 1000 for k in range(1, 101)]))
    exact = (
        math.isclose(fixed["latency_mean_ms"], 2.0, rel_tol=1e-12)
        and math.isclose(fixed["latency_p95_ms"], 2.0, rel_tol=1e-12)
        and math.isclose(fixed["throughput_samples_per_s"], 1024 / 0.002, rel_tol=1e-12)
        and math.isclose(ramp["latency_p95_ms"], 95.0, rel_tol=1e-12)
        and math.isclose(ramp["latency_mean_ms"], 50.5, rel_tol=1e-12)
    )
    b = load_json(run, "bench.json")["models"]
    t, s = b["teacher"], b["student_fp32"]
    ok = exact and s["throughput_samples_per_s"] > t["throughput_samples_per_s"]
    ok = ok and s["latency_mean_ms"] < t["latency_mean_ms"]
    verdict(record_property, "6 benchmark", ok,
            f"fake-clock closed forms exact={exact}; throughput student {s['throughput_samples_per_s']:.0f} "
            f"> teacher {t['throughput_samples_per_s']:.0f}/s; mean latency {s['latency_mean_ms']:.3f} "
            f"< {t['latency_mean_ms']:.3f} ms")


# ---------------------------------------------------------------- 7


def _bench_static(path):
    with open(path) as fh:
        return [(r["model"], r["params"], r["kb"], r["compression"]) for r in csv.DictReader(fh)]


def test_criterion_7_determinism(runs, record_property):
    (a, b), seconds = runs
    names = sorted(set(os.listdir(a)) | set(os.listdir(b)))
    compared, differ = [], []
    for n in names:
        if n in MEASURED:
            continue
        pa, pb = os.path.join(a, n), os.path.join(b, n)
        compared.append(n)
        if not (os.path.exists(pa) and os.path.exists(pb)) or open(pa, "rb").read() != open(pb, "rb").read():
            differ.append(n)
    need = {"teacher.kids", "student_fp32.kids", "student_int8.kids", "metrics.json"}
    csvs = [n for n in compared if n.endswith(".csv")]
    # bench.csv holds timings; its deterministic columns must still agree
    static_ok = _bench_static(os.path.join(a, "bench.csv")) == _bench_static(os.path.join(b, "bench.csv"))
    ok = not differ and need <= set(compared) and static_ok and sum(seconds) < 30 * 60
    verdict(record_property, "7 determinism", ok,
            f"{len(compared)} files byte-identical incl. {len(csvs)} CSVs and all model files; "
            f"differing: {differ or 'none'}; bench.csv static columns equal={static_ok}; "
            f"{sum(seconds):.0f}s for two runs")


# ---------------------------------------------------------------- 8


def test_criterion_8_metric_fixtures(record_property):
    checks = []
    m = confusion_and_metrics([1, 1, 0, 0], [1, 0, 0, 0], 2)
    checks += [
        m.confusion == [[2, 0], [1, 1]],
        math.isclose(m.precision[1], 1.0) and math.isclose(m.recall[1], 0.5),
        math.isclose(m.f1[1], 2 / 3) and math.isclose(m.macro_f1, (0.8 + 2 / 3) / 2),
        math.isclose(m.binary_specificity, 1.0),
    ]
    # every attack caught while some benign rows are flagged
    m = confusion_and_metrics([0, 0, 0, 0, 1, 1, 1], [0, 0, 0, 1, 1, 1, 1], 2)
    checks += [m.recall[1] == 1.0, math.isclose(m.binary_specificity, 0.75), m.binary_specificity < 1.0]
    m = confusion_and_metrics([0, 0, 0, 1, 1, 2, 2, 2, 2], [0, 0, 1, 1, 1, 2, 2, 0, 2], 3)
    checks += [
        m.confusion == [[2, 1, 0], [0, 2, 0], [1, 0, 3]],
        np.allclose(m.precision, [2 / 3, 2 / 3, 1.0]),
        np.allclose(m.recall, [2 / 3, 1.0, 0.75]),
        np.allclose(m.specificity, [5 / 6, 6 / 7, 1.0]),
        math.isclose(m.macro_f1, (2 / 3 + 0.8 + 6 / 7) / 3),
        math.isclose(m.accuracy, 7 / 9),
    ]
    verdict(record_property, "8 metrics", all(checks), f"{sum(checks)}/{len(checks)} hand-computed values match")
