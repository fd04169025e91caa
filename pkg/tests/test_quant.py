import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kronids.errors import DataError, NumericalError, ShapeError
from kronids.nn import Dense, Model, build_student, build_teacher, deserialize, load_model, save_model, serialize
from kronids.numcore import SeededRng
from kronids.quant import QuantTensor, parity_eval, quantize_tensor, quantize_weights, size_report


def test_quantize_unit_example():
    qt = quantize_tensor(np.array([-1.0, 0.0, 1.0], np.float32))
    np.testing.assert_array_equal(qt.q, [-127, 0, 127])
    assert qt.q.dtype == np.int8 and qt.zero_point == 0
    assert qt.scale == pytest.approx(1 / 127, rel=1e-7)


def test_quantize_all_zero_tensor():
    qt = quantize_tensor(np.zeros((3, 2), np.float32))
    assert qt.scale == 1.0 and not qt.q.any()
    np.testing.assert_array_equal(qt.dequantize(), np.zeros((3, 2)))


def test_quantize_rejects_non_finite():
    with pytest.raises(NumericalError):
        quantize_tensor(np.array([1.0, np.inf]))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-1e4, 1e4, width=32)))
def test_dequantize_error_within_half_scale(w):
    qt = quantize_tensor(w)
    assert np.all(np.abs(qt.q.astype(int)) <= 127)
    err = np.abs(qt.dequantize().astype(np.float64) - w.astype(np.float64))
    # half a step, plus float32 rounding of the reconstruction itself
    assert np.all(err <= qt.scale / 2 + np.abs(w).max() * 2**-23)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-100, 100, width=32)))
def test_requantization_is_idempotent(w):
    qt = quantize_tensor(w)
    again = quantize_tensor(qt.dequantize())
    np.testing.assert_array_equal(qt.q, again.q)


def test_quantize_weights_covers_dense_and_kron_only():
    model = build_student(32, 4, seed=1).eval()
    q = quantize_weights(model)
    kinds = {layer.kind for layer in q.layers if layer.quant}
    assert kinds == {"kron", "dense"}
    for layer in q.layers:
        if layer.kind == "batchnorm":
            assert not layer.quant
            np.testing.assert_array_equal(layer.params["gamma"], model.layers[q.layers.index(layer)].params["gamma"])
    # the source model is untouched
    assert not any(layer.quant for layer in model.layers)


def test_quantize_requires_eval_mode():
    with pytest.raises(ValueError):
        quantize_weights(build_student(8, 2).train())


def test_int8_file_smaller_and_round_trips(tmp_path):
    model = build_student(32, 10, seed=2).eval()
    q = quantize_weights(model)
    n32 = save_model(model, tmp_path / "fp32.kids")
    n8 = save_model(q, tmp_path / "int8.kids")
    assert n8 < n32
    loaded = load_model(tmp_path / "int8.kids")
    X = SeededRng(0).normal(size=(16, 32)).astype(np.float32)
    np.testing.assert_array_equal(loaded(X), q(X))
    assert serialize(loaded) == serialize(q)
    rep = size_report(tmp_path / "int8.kids", tmp_path / "fp32.kids")
    assert rep["bytes"] == n8 and rep["compression"] == pytest.approx(n32 / n8)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_int8_file_smaller_above_64_params(n_in, n_out):
    model = Model([Dense(n_in, n_out, SeededRng(n_in * 41 + n_out))], n_in).eval()
    if model.n_params <= 64:
        return
    assert len(serialize(quantize_weights(model))) < len(serialize(model))


def test_teacher_to_student_file_compression():
    t = len(serialize(build_teacher(49, 10)))
    s = len(serialize(build_student(32, 10)))
    assert t / s > 100


def test_size_report_missing_file(tmp_path):
    with pytest.raises(DataError):
        size_report(tmp_path / "none.kids")


def test_parity_lossless_case():
    # weights that are exact multiples of a power-of-two step survive quantization unchanged
    rng = SeededRng(3)
    model = build_student(16, 3, hidden=(16, 8), seed=3).eval()
    for layer in model.layers:
        for name, w in layer.params.items():
            if layer.kind in ("dense", "kron"):
                q = rng.integers(-127, 128, w.shape)
                q.flat[0] = 127
                layer.params[name] = (q * 2.0**-7).astype(np.float32)
    qmodel = quantize_weights(model)
    for la, lb in zip(model.layers, qmodel.layers):
        for name in la.params:
            np.testing.assert_array_equal(la.params[name], lb.params[name])
    X = rng.normal(size=(200, 16)).astype(np.float32)
    y = rng.integers(0, 3, 200)
    res = parity_eval(model, qmodel, X, y, 3)
    assert res["delta_accuracy"] == 0.0 and res["delta_macro_f1"] == 0.0


def test_parity_architecture_mismatch():
    a = build_student(16, 3, hidden=(16, 8)).eval()
    b = build_student(16, 3, hidden=(16, 4)).eval()
    with pytest.raises(ShapeError):
        parity_eval(a, quantize_weights(b), np.zeros((2, 16), np.float32), np.zeros(2, int), 3)


def test_quant_tensor_survives_serialization():
    model = quantize_weights(build_student(8, 2, hidden=(8, 4), seed=4).eval())
    again = deserialize(serialize(model))
    for la, lb in zip(model.layers, again.layers):
        for name, qt in la.quant.items():
            assert isinstance(lb.quant[name], QuantTensor)
            np.testing.assert_array_equal(qt.q, lb.quant[name].q)
            assert qt.scale == lb.quant[name].scale
