"""Vector primitives, seeded Gaussian sampling and a finite-difference oracle.

All arithmetic is float64. Gaussian draws come from numpy's PCG64 bit
generator with the ziggurat normal sampler (``Generator.standard_normal``),
so streams are fixed by (seed, call sequence) and by the numpy release.
"""

from __future__ import annotations

import numpy as np

from .errors import ZeroVector

ZERO_NORM = 1e-12


def _as_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` (or each slice along ``axis``) to unit Euclidean norm."""
    v = _as_vec(v)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm < ZERO_NORM):
        raise ZeroVector(f"cannot normalize vector with norm below {ZERO_NORM}")
    return v / norm


def cosine(u, v) -> float:
    cos = float(np.dot(l2_normalize(u), l2_normalize(v)))
    return min(1.0, max(-1.0, cos))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = _as_vec(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = _as_vec(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def normalize_backward(u: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``u/||u||`` back to ``u`` (row-wise on the last axis)."""
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    unit = u / norm
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norm


class Rng:
    """Seeded Gaussian source. Not thread-safe; use :meth:`spawn` per consumer."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy)
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self.generator.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def spawn(self, n: int = 1) -> list[Rng]:
        """Independent child streams; the parent stream is not advanced."""
        return [Rng(child) for child in self._seq.spawn(n)]


def sample_gaussian(rng: Rng, dim: int) -> np.ndarray:
    if dim <= 0:
        raise ValueError("dim must be positive")
    return rng.normal(dim)


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the flattened arrays."""
    a = _as_vec(a).ravel()
    b = _as_vec(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
