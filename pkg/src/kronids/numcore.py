"""Dense linear algebra, seeded randomness and gradient checking.

Matrices are plain ``numpy.ndarray`` objects (2-D, C-contiguous). Two
precisions are used throughout the package: ``float64`` for oracles and
gradient checks, ``float32`` for training and inference.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericalError, ShapeError

F32 = np.float32
F64 = np.float64


class SeededRng:
    """Deterministic random source backed by numpy's PCG64 bit generator.

    PCG64 (permuted congruential generator, 128-bit state, XSL-RR output)
    has a stable, documented bit stream that does not depend on the
    platform, so a seed reproduces the same draws on every machine.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "SeededRng":
        """Child generator whose seed is a pure function of (seed, keys)."""
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in keys]])
        return SeededRng(int(ss.generate_state(2, np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def random(self, size=None):
        return self.gen.random(size)


def derive_seed(seed: int, *keys: int) -> int:
    """Integer seed derived from a root seed and integer keys."""
    return SeededRng(seed).spawn(*keys).seed


def as_matrix(a, dtype=F64) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``z / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z)
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(z) / temperature
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def kron_dense(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Materialized Kronecker product. Only used as a test oracle."""
    a = np.asarray(a)
    b = np.asarray(b)
    a1, a2 = a.shape
    b1, b2 = b.shape
    out = a[:, None, :, None] * b[None, :, None, :]
    return out.reshape(a1 * b1, a2 * b2)


def grad_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    ``f`` receives an array shaped like ``point``; ``point`` itself is never
    modified. The relative error per element is
    ``|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=F64, copy=True)
    g_an = np.asarray(analytic_grad, dtype=F64)
    if g_an.shape != x.shape:
        raise ShapeError(f"gradient shape {g_an.shape} != point shape {x.shape}")
    flat = x.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"f is not finite near element {i}")
        g_fd[i] = (fp - fm) / (2 * eps)
    diff = np.abs(g_fd - g_an.reshape(-1))
    denom = np.maximum(1e-8, np.abs(g_fd) + np.abs(g_an.reshape(-1)))
    return float(np.max(diff / denom)) if flat.size else 0.0


def check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")
