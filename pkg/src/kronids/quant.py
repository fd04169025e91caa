"""Post-training int8 weight quantization.

Weights are quantized per tensor with a symmetric scale
(``scale = max|w| / 127``, zero point 0) and dequantized back to fp32 when a
model is loaded, so inference still runs in fp32. Batch-norm layers are
left in fp32 entirely.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, ShapeError

QMAX = 127
QUANTIZED_KINDS = ("dense", "kron")


@dataclass
class QuantTensor:
    q: np.ndarray
    scale: float
    zero_point: int = 0

    @property
    def shape(self):
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        return (np.float32(self.scale) * (self.q.astype(np.float32) - np.float32(self.zero_point))).astype(np.float32)


def quantize_tensor(w: np.ndarray) -> QuantTensor:
    """Symmetric per-tensor int8 quantization, round-half-to-even."""
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise NumericalError("cannot quantize a tensor with non-finite values")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return QuantTensor(np.zeros(w.shape, np.int8), 1.0, 0)
    # the scale is stored as f32, so quantize against the f32 value
    scale = float(np.float32(peak / QMAX))
    q = np.clip(np.rint(w.astype(np.float64) / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, scale, 0)


def quantize_weights(model):
    """Copy of ``model`` with every dense/Kronecker tensor stored as int8.

    The returned model holds the dequantized values in its parameters, so
    its forward pass is ordinary fp32 arithmetic; the ``QuantTensor``
    records are what gets written to disk.
    """
    if model.training:
        raise ValueError("quantize an eval-mode model")
    qmodel = copy.deepcopy(model)
    for layer in qmodel.layers:
        if layer.kind not in QUANTIZED_KINDS:
            continue
        for name, w in layer.params.items():
            qt = quantize_tensor(w)
            layer.quant[name] = qt
            layer.params[name] = qt.dequantize()
    return qmodel.eval()


def same_architecture(a, b) -> bool:
    if a.in_dim != b.in_dim or len(a.layers) != len(b.layers):
        return False
    return all(
        la.kind == lb.kind and la.shape_header() == lb.shape_header() for la, lb in zip(a.layers, b.layers)
    )


def parity_eval(fp32_model, int8_model, X: np.ndarray, y: np.ndarray, n_classes: int) -> dict:
    """Evaluate both models on identical rows; report metric deltas (int8 - fp32)."""
    from .evalbench import confusion_and_metrics

    if not same_architecture(fp32_model, int8_model):
        raise ShapeError("fp32 and int8 models have different architectures")
    fp = confusion_and_metrics(y, fp32_model.predict(X), n_classes)
    q8 = confusion_and_metrics(y, int8_model.predict(X), n_classes)
    return {
        "fp32": fp,
        "int8": q8,
        "delta_accuracy": q8.accuracy - fp.accuracy,
        "delta_macro_f1": q8.macro_f1 - fp.macro_f1,
    }


def size_report(path, reference=None) -> dict:
    """On-disk size of a model file, optionally relative to a reference file."""
    if not os.path.exists(path):
        raise DataError(f"model file not found: {path}")
    n = os.path.getsize(path)
    out = {"path": str(path), "bytes": n, "kb": n / 1024.0}
    if reference is not None:
        if not os.path.exists(reference):
            raise DataError(f"reference model file not found: {reference}")
        out["reference"] = str(reference)
        out["compression"] = os.path.getsize(reference) / n
    return out
