"""Dense linear-algebra helpers and seeded randomness.

Matrices and vectors are plain float64 numpy arrays; the helpers here only
validate shape/finiteness and route the hot products through ``kernels``.
"""
import numpy as np

from . import kernels

EPS = 1e-12


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near) zero norm is used as a direction."""


def as_matrix(x, name="matrix"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


def as_vector(x, name="vector"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected 1-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


def matmul(a, b):
    """Matrix product with a fixed left-to-right reduction over the inner index."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    return kernels.matmul(a, b)


def cosine(v1, v2):
    v1 = as_vector(v1, "v1")
    v2 = as_vector(v2, "v2")
    if v1.shape != v2.shape:
        raise ValueError(f"cosine: dims differ ({v1.size} vs {v2.size})")
    n1 = float(np.sqrt(np.dot(v1, v1)))
    n2 = float(np.sqrt(np.dot(v2, v2)))
    if n1 <= EPS or n2 <= EPS:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(np.dot(v1, v2) / (n1 * n2))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite logits")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(v):
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


class SeededRng:
    """Philox counter-based generator; the same seed gives the same stream everywhere.

    ``child(*keys)`` derives an independent stream from the seed and a key
    path, so components never share or consume each other's draws.
    """

    def __init__(self, seed, keys=()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys):
        return SeededRng(self.seed, self.keys + tuple(keys))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)
