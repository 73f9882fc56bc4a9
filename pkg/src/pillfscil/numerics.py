"""Dense numerics shared by every other module.

All arrays are float64. Vectors are 1-D numpy arrays, batches are 2-D with one
sample per row.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import logsumexp


class InvalidInputError(ValueError):
    """Raised for non-finite or out-of-range numeric input."""


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for the input (e.g. zero norm)."""


def as_vector(x, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def as_matrix(x, name="x"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidInputError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def _check_temperature(temperature):
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")


def log_softmax(logits, temperature=1.0, axis=-1):
    """Log-probabilities via log-sum-exp; works on vectors and row batches."""
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain non-finite entries")
    return z - logsumexp(z, axis=axis, keepdims=True)


def softmax(logits, temperature=1.0, axis=-1):
    """Temperature-scaled softmax with max-subtraction."""
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain non-finite entries")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def euclidean_distance(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))


def cosine_similarity(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` may be any shape; the result has the same shape. ``h`` must lie in
    [1e-6, 1e-3].
    """
    if not 1e-6 <= h <= 1e-3:
        raise InvalidInputError(f"step h={h} outside [1e-6, 1e-3]")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` between two gradients."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def checksum(*arrays):
    """SHA-256 over the little-endian float64 bytes of the given arrays."""
    h = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Rng:
    """Seeded random source backed by the Philox4x64 counter-based generator.

    Philox output is bit-exact across platforms for a given key, so the same
    seed always yields the same draws. ``derive`` produces independent child
    streams keyed on (seed, *ids), which lets per-class work be reordered or
    parallelised without changing results.
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidInputError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *ids):
        return Rng(self.seed, self._path + tuple(ids))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def open_unit(self):
        """A draw from the open interval (0, 1)."""
        while True:
            u = float(self._gen.random())
            if u > 0.0:
                return u

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def get_state(self):
        state = self._gen.bit_generator.state
        return {"seed": self.seed, "path": list(self._path), "bit_generator": _jsonable(state)}

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["path"])
        rng._gen.bit_generator.state = _from_jsonable(state["bit_generator"])
        return rng


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
