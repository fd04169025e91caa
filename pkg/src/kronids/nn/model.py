"""Sequential model graph plus the teacher and student builders."""
from __future__ import annotations

import copy
import math

import numpy as np

from ..errors import ShapeError
from ..numcore import F32, SeededRng
from .layers import BatchNorm, Dense, Dropout, KronDense, Layer, Pad, ReLU


class Model:
    """Fixed sequential topology with train/eval mode."""

    def __init__(self, layers: list[Layer], in_dim: int, seed: int = 0):
        self.layers = list(layers)
        self.in_dim = int(in_dim)
        self.training = False
        self.rng = SeededRng(seed)
        d = self.in_dim
        for layer in self.layers:
            if isinstance(layer, (Dense, Pad)) and layer.n_in != d:
                raise ShapeError(f"{layer!r} expects {layer.n_in} inputs but receives {d}")
            if isinstance(layer, KronDense) and layer.n != d:
                raise ShapeError(f"{layer!r} expects {layer.n} inputs but receives {d}")
            if isinstance(layer, BatchNorm) and layer.dim != d:
                raise ShapeError(f"{layer!r} expects {layer.dim} features but receives {d}")
            d = layer.out_dim(d)
        self.out_dim = d

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return next(iter(layer.params.values())).dtype
        return self.layers[0].dtype if self.layers else np.dtype(F32)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def reseed(self, seed: int) -> None:
        self.rng = SeededRng(seed)

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=self.dtype)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"model expects (n, {self.in_dim}) input, got {h.shape}")
        for layer in self.layers:
            h = layer.forward(h, self.training, self.rng)
        return h

    __call__ = forward

    def backward(self, G: np.ndarray) -> np.ndarray:
        g = np.asarray(G, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def predict_logits(self, X: np.ndarray, batch_size: int = 8192) -> np.ndarray:
        """Eval-mode logits, computed in chunks. Restores the previous mode."""
        was = self.training
        self.training = False
        try:
            chunks = [self.forward(X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
        finally:
            self.training = was
        if not chunks:
            return np.zeros((0, self.out_dim), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_logits(X).argmax(axis=1)

    def parameters(self):
        """Yield (layer, name) for every trainable tensor, in a fixed order."""
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def state(self) -> list[dict[str, np.ndarray]]:
        return [
            {**{k: v.copy() for k, v in l.params.items()}, **{k: v.copy() for k, v in l.buffers.items()}}
            for l in self.layers
        ]

    def load_state(self, state: list[dict[str, np.ndarray]]) -> None:
        for layer, st in zip(self.layers, state):
            for k in layer.params:
                layer.params[k] = st[k].copy()
            for k in layer.buffers:
                layer.buffers[k] = st[k].copy()

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def summary(self) -> str:
        return " -> ".join(repr(l) for l in self.layers)


def build_teacher(
    p: int,
    n_classes: int,
    dropout_rate: float = 0.3,
    hidden: tuple[int, ...] = (512, 256, 128),
    seed: int = 0,
    dtype=F32,
) -> Model:
    """MLP: p -> [dense, BN, ReLU, dropout] per hidden width -> dense logit head."""
    if p < 1 or n_classes < 2:
        raise ValueError(f"need p >= 1 and at least 2 classes, got p={p}, C={n_classes}")
    rng = SeededRng(seed)
    layers: list[Layer] = []
    d = p
    for width in hidden:
        layers += [Dense(d, width, rng, dtype), BatchNorm(width, dtype=dtype), ReLU(dtype), Dropout(dropout_rate, dtype)]
        d = width
    layers.append(Dense(d, n_classes, rng, dtype))
    return Model(layers, p, seed=seed)


def near_square_split(n: int) -> tuple[int, int]:
    """(a, b) with a*b == n, a <= b, a the largest divisor not above sqrt(n)."""
    a = int(math.isqrt(n))
    while n % a:
        a -= 1
    return a, n // a


def is_factorable(n: int) -> bool:
    return n >= 4 and near_square_split(n)[0] > 1


def nearest_factorable(n: int) -> tuple[int, int]:
    lo = n
    while lo > 3 and not is_factorable(lo):
        lo -= 1
    hi = max(n, 4)
    while not is_factorable(hi):
        hi += 1
    return lo, hi


def kron_shapes_for(m: int, n: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Near-square factor shapes for an m x n Kronecker weight."""
    for dim, what in ((m, "output"), (n, "input")):
        if not is_factorable(dim):
            lo, hi = nearest_factorable(dim)
            raise ShapeError(
                f"Kronecker {what} dimension {dim} has no nontrivial factorization; "
                f"use {hi}" + (f" or {lo}" if lo >= 4 and is_factorable(lo) else "")
            )
    a1, b1 = near_square_split(m)
    a2, b2 = near_square_split(n)
    return (a1, a2), (b1, b2)


def build_student(
    k: int,
    n_classes: int,
    hidden: tuple[int, int] = (64, 32),
    kron_shapes: list[tuple[tuple[int, int], tuple[int, int]]] | None = None,
    seed: int = 0,
    dtype=F32,
) -> Model:
    """pad(K -> n) -> kron -> BN -> ReLU -> kron -> BN -> ReLU -> dense head.

    ``kron_shapes`` gives ``[(a_shape, b_shape), (a_shape, b_shape)]`` for the
    two Kronecker layers. When omitted, the input is padded to the smallest
    factorable width >= K and near-square factors are chosen for each layer.
    """
    if k < 1 or n_classes < 2:
        raise ValueError(f"need K >= 1 and at least 2 classes, got K={k}, C={n_classes}")
    if kron_shapes is None:
        n0 = k if is_factorable(k) else nearest_factorable(k)[1]
        h1, h2 = hidden
        kron_shapes = [kron_shapes_for(h1, n0), kron_shapes_for(h2, h1)]
    if len(kron_shapes) != 2:
        raise ShapeError("student needs exactly two Kronecker layers")
    (a, b), (c, d) = kron_shapes
    n0, m1 = a[1] * b[1], a[0] * b[0]
    n1, m2 = c[1] * d[1], c[0] * d[0]
    if n0 < k:
        raise ShapeError(
            f"first Kronecker layer takes {n0} inputs, fewer than K={k}; "
            f"choose factors with a2*b2 >= {k} (e.g. {nearest_factorable(k)[1]})"
        )
    if n1 != m1:
        raise ShapeError(f"second Kronecker layer input {n1} != first layer output {m1}")
    rng = SeededRng(seed)
    layers: list[Layer] = [
        Pad(k, n0, dtype),
        KronDense(a, b, rng, dtype),
        BatchNorm(m1, dtype=dtype),
        ReLU(dtype),
        KronDense(c, d, rng, dtype),
        BatchNorm(m2, dtype=dtype),
        ReLU(dtype),
        Dense(m2, n_classes, rng, dtype),
    ]
    return Model(layers, k, seed=seed)


def teacher_param_count(p: int, n_classes: int, hidden=(512, 256, 128)) -> int:
    """Closed-form parameter count of ``build_teacher`` (BN: gamma and beta)."""
    total, d = 0, p
    for w in hidden:
        total += d * w + w + 2 * w
        d = w
    return total + d * n_classes + n_classes
