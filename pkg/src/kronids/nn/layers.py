"""Layers with explicit forward/backward passes.

Every layer keeps its trainable tensors in ``params`` and the matching
gradients (same keys, same shapes) in ``grads``. ``backward`` overwrites
``grads``; it never accumulates across calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..numcore import F32, SeededRng


class Layer:
    kind: str = ""
    tag: int = 0

    def __init__(self, dtype=F32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # name -> QuantTensor for tensors loaded from / destined to int8 storage
        self.quant: dict = {}

    def forward(self, x: np.ndarray, train: bool, rng: SeededRng | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_dim(self, in_dim: int) -> int:
        return in_dim

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def shape_header(self) -> list[int]:
        return []

    def attrs(self) -> list[float]:
        return []

    def __repr__(self):
        hdr = ",".join(map(str, self.shape_header()))
        return f"{self.kind}({hdr})"


class Dense(Layer):
    """Affine map ``y = x W^T + b`` with ``W`` of shape (out, in)."""

    kind, tag = "dense", 1

    def __init__(self, n_in: int, n_out: int, rng: SeededRng | None = None, dtype=F32):
        super().__init__(dtype)
        self.n_in, self.n_out = int(n_in), int(n_out)
        bound = 1.0 / np.sqrt(self.n_in)
        if rng is None:
            w = np.zeros((self.n_out, self.n_in))
            b = np.zeros(self.n_out)
        else:
            w = rng.uniform(-bound, bound, (self.n_out, self.n_in))
            b = rng.uniform(-bound, bound, self.n_out)
        self.params = {"W": w.astype(self.dtype), "b": b.astype(self.dtype)}

    def forward(self, x, train, rng=None):
        if x.shape[1] != self.n_in:
            raise ShapeError(f"dense expects {self.n_in} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, g):
        self.grads = {"W": g.T @ self._x, "b": g.sum(axis=0)}
        return g @ self.params["W"]

    def out_dim(self, in_dim):
        return self.n_out

    def shape_header(self):
        return [self.n_in, self.n_out]


class BatchNorm(Layer):
    kind, tag = "batchnorm", 2

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1, dtype=F32):
        super().__init__(dtype)
        self.dim, self.eps, self.momentum = int(dim), float(eps), float(momentum)
        self.params = {"gamma": np.ones(dim, self.dtype), "beta": np.zeros(dim, self.dtype)}
        self.buffers = {"running_mean": np.zeros(dim, self.dtype), "running_var": np.ones(dim, self.dtype)}

    def forward(self, x, train, rng=None):
        if x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects {self.dim} features, got {x.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            n = x.shape[0]
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if self.momentum:
                unbiased = var * (n / (n - 1)) if n > 1 else var
                m = self.momentum
                self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mu).astype(self.dtype)
                self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(self.dtype)
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(self.dtype)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std, train)
        return xhat * gamma + beta

    def backward(self, g):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads = {"gamma": (g * xhat).sum(axis=0), "beta": g.sum(axis=0)}
        gx = g * gamma
        if not train:
            return gx * inv_std
        n = g.shape[0]
        return (inv_std / n) * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))

    def shape_header(self):
        return [self.dim]

    def attrs(self):
        return [self.eps, self.momentum]


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-rate)`` at train time."""

    kind, tag = "dropout", 3

    def __init__(self, rate: float, dtype=F32):
        super().__init__(dtype)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, train, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs a random source")
        keep = 1.0 - self.rate
        self._mask = ((rng.random(x.shape) < keep) / keep).astype(self.dtype)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask

    def attrs(self):
        return [self.rate]


class ReLU(Layer):
    kind, tag = "relu", 4

    def forward(self, x, train, rng=None):
        self._pos = x > 0
        return np.where(self._pos, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._pos, g, 0).astype(g.dtype, copy=False)


class Pad(Layer):
    """Append zero columns; the adjoint truncates them."""

    kind, tag = "pad", 6

    def __init__(self, n_in: int, to_dim: int, dtype=F32):
        super().__init__(dtype)
        if to_dim < n_in:
            raise ShapeError(f"cannot pad {n_in} columns down to {to_dim}")
        self.n_in, self.to_dim = int(n_in), int(to_dim)

    def forward(self, x, train, rng=None):
        if x.shape[1] != self.n_in:
            raise ShapeError(f"pad expects {self.n_in} inputs, got {x.shape[1]}")
        if self.to_dim == self.n_in:
            return x
        out = np.zeros((x.shape[0], self.to_dim), dtype=x.dtype)
        out[:, : self.n_in] = x
        return out

    def backward(self, g):
        return g[:, : self.n_in]

    def out_dim(self, in_dim):
        return self.to_dim

    def shape_header(self):
        return [self.n_in, self.to_dim]


@dataclass
class KronFactors:
    """Factors of ``W = A kron B`` plus bias; W is (m, n) with m=a1*b1, n=a2*b2."""

    A: np.ndarray
    B: np.ndarray
    bias: np.ndarray

    @property
    def m(self) -> int:
        return self.A.shape[0] * self.B.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1] * self.B.shape[1]

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size + self.bias.size


def kron_forward(f: KronFactors, X: np.ndarray) -> np.ndarray:
    """Rows of ``X @ (A kron B)^T + bias`` without forming the product.

    Each input row is reshaped row-major to (a2, b2), mapped to
    ``A @ Xm @ B^T`` of shape (a1, b1), and flattened row-major.
    """
    a1, a2 = f.A.shape
    b1, b2 = f.B.shape
    if X.ndim != 2 or X.shape[1] != a2 * b2:
        raise ShapeError(f"kron layer expects {a2 * b2} inputs, got shape {X.shape}")
    if f.bias.shape != (a1 * b1,):
        raise ShapeError(f"bias shape {f.bias.shape} != ({a1 * b1},)")
    Xm = X.reshape(-1, a2, b2)
    Y = f.A @ Xm @ f.B.T
    return Y.reshape(-1, a1 * b1) + f.bias


def kron_backward(f: KronFactors, X: np.ndarray, G: np.ndarray):
    """Gradients (dA, dB, dbias, dX) of ``kron_forward`` for upstream ``G``."""
    a1, a2 = f.A.shape
    b1, b2 = f.B.shape
    if X.ndim != 2 or X.shape[1] != a2 * b2:
        raise ShapeError(f"kron input shape {X.shape} does not match n={a2 * b2}")
    if G.shape != (X.shape[0], a1 * b1):
        raise ShapeError(f"upstream shape {G.shape} != ({X.shape[0]}, {a1 * b1})")
    Xm = X.reshape(-1, a2, b2)
    Gm = G.reshape(-1, a1, b1)
    # dA = sum_n Gm (Xm B^T)^T ; dB = sum_n Gm^T A Xm ; dXm = A^T Gm B
    dA = np.einsum("nij,nkj->ik", Gm @ f.B, Xm)
    dB = np.einsum("nji,njk->ik", Gm, f.A @ Xm)
    dX = (f.A.T @ Gm @ f.B).reshape(-1, a2 * b2)
    return dA, dB, G.sum(axis=0), dX


class KronDense(Layer):
    kind, tag = "kron", 5

    def __init__(self, a_shape, b_shape, rng: SeededRng | None = None, dtype=F32):
        super().__init__(dtype)
        (a1, a2), (b1, b2) = a_shape, b_shape
        self.a_shape, self.b_shape = (int(a1), int(a2)), (int(b1), int(b2))
        self.m, self.n = a1 * b1, a2 * b2
        if rng is None:
            A, B, bias = np.zeros(self.a_shape), np.zeros(self.b_shape), np.zeros(self.m)
        else:
            # Var(A_ij B_kl) = 1/a2 * 1/b2 = 1/n, a fan-in scaled init of W
            A = rng.uniform(-np.sqrt(3.0 / a2), np.sqrt(3.0 / a2), self.a_shape)
            B = rng.uniform(-np.sqrt(3.0 / b2), np.sqrt(3.0 / b2), self.b_shape)
            bound = 1.0 / np.sqrt(self.n)
            bias = rng.uniform(-bound, bound, self.m)
        self.params = {"A": A.astype(self.dtype), "B": B.astype(self.dtype), "bias": bias.astype(self.dtype)}

    @property
    def factors(self) -> KronFactors:
        return KronFactors(self.params["A"], self.params["B"], self.params["bias"])

    def forward(self, x, train, rng=None):
        self._x = x
        return kron_forward(self.factors, x)

    def backward(self, g):
        dA, dB, db, dX = kron_backward(self.factors, self._x, g)
        self.grads = {"A": dA, "B": dB, "bias": db}
        return dX

    def out_dim(self, in_dim):
        return self.m

    def shape_header(self):
        return [self.m, self.n, *self.a_shape, *self.b_shape]


LAYER_TYPES = {cls.tag: cls for cls in (Dense, BatchNorm, Dropout, ReLU, KronDense, Pad)}
