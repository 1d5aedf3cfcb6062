"""Stochastic cosine classifier bank.

Each class owns ``M`` mean vectors (one per rotation) and one variance vector
shared by all its rotations. A sampled weight is ``mean + eps * sigma``.

Heads are stored task-major in the order classes were added, so the flat
index of head ``(class position c, rotation r)`` is ``c * M + r``.

Checkpoint layout (little-endian)::

    magic b"S3CH" | version u16 | M u16 | classes u32 | d u32 | eta f64
    per class: class_id u32 | task_id u16 | means M*d f64 | sigma d f64
"""

from __future__ import annotations

import struct

import numpy as np

from .data import ClassEmbeddingTable
from .errors import FormatError, MissingEmbedding, UnknownClass
from .numerics import Rng, l2_normalize

MAGIC = b"S3CH"
VERSION = 1
_HEADER = struct.Struct("<4sHHIId")
_CLASS = struct.Struct("<IH")


class StochasticHead:
    def __init__(self, dim: int, rotations: int = 4, eta: float = 16.0):
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.dim = dim
        self.rotations = rotations
        self.eta = float(eta)
        self.means = np.zeros((0, rotations, dim))
        self.sigma = np.zeros((0, dim))
        self.class_ids = np.zeros(0, dtype=np.int64)
        self.task_ids = np.zeros(0, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def n_heads(self) -> int:
        return self.n_classes * self.rotations

    def index_of(self, class_id) -> int:
        hits = np.flatnonzero(self.class_ids == int(class_id))
        if hits.size == 0:
            raise UnknownClass(f"class {class_id} has no classifier")
        return int(hits[0])

    def indices_of(self, class_ids) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as exc:
            raise UnknownClass(f"class {exc.args[0]} has no classifier") from None

    def add_classes(self, task_id: int, class_ids, means, sigma) -> None:
        class_ids = np.asarray(class_ids, dtype=np.int64)
        means = np.asarray(means, dtype=np.float64).reshape(len(class_ids), self.rotations, self.dim)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(len(class_ids), self.dim)
        if np.any(np.isin(class_ids, self.class_ids)):
            raise ValueError("class already has a classifier")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        self.means = np.concatenate([self.means, means])
        self.sigma = np.concatenate([self.sigma, sigma])
        self.class_ids = np.concatenate([self.class_ids, class_ids])
        self.task_ids = np.concatenate([self.task_ids, np.full(len(class_ids), task_id)])

    def init_base_classes(self, task_id, class_ids, rng: Rng, sigma0: float = 0.1) -> None:
        """Means ~ N(0, 1/d), variances constant ``sigma0``."""
        n = len(class_ids)
        means = rng.normal((n, self.rotations, self.dim)) / np.sqrt(self.dim)
        self.add_classes(task_id, class_ids, means, np.full((n, self.dim), sigma0))

    def copy(self) -> StochasticHead:
        out = StochasticHead(self.dim, self.rotations, self.eta)
        out.means = self.means.copy()
        out.sigma = self.sigma.copy()
        out.class_ids = self.class_ids.copy()
        out.task_ids = self.task_ids.copy()
        return out

    # sampling and scoring

    def draw_noise(self, rng: Rng) -> np.ndarray:
        """One standard-normal vector per (class, rotation)."""
        return rng.normal(self.means.shape)

    def sample(self, rng: Rng | None = None, eps: np.ndarray | None = None) -> np.ndarray:
        """Sampled weights ``(classes, M, d)``; pass ``eps`` to fix the noise."""
        if eps is None:
            eps = self.draw_noise(rng)
        return self.means + eps * self.sigma[:, None, :]

    def flat(self, weights: np.ndarray | None = None) -> np.ndarray:
        w = self.means if weights is None else weights
        return w.reshape(-1, self.dim)

    def logits(self, feature, weights: np.ndarray | None = None) -> np.ndarray:
        """``eta * cos(w_h, feature)`` for every head ``h`` in flat order.

        A batch of features ``(n, d)`` gives logits ``(n, heads)``.
        """
        unit_w = l2_normalize(self.flat(weights))
        return self.eta * (l2_normalize(feature) @ unit_w.T)

    # new classes

    def init_new_class(self, task_id: int, class_id: int, rotated_features,
                       embeddings: ClassEmbeddingTable, base_class_ids=None,
                       relative_variance: bool = False, match_norm: bool = False) -> None:
        """Centroid means per rotation, variance copied from the nearest base class.

        ``rotated_features`` is ``(shots, M, d)``: features of each shot under
        every rotation, from the frozen extractor. Similarity is embedding
        cosine; ties go to the lowest class id.
        """
        feats = np.asarray(rotated_features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[0] < 1 or feats.shape[1:] != (self.rotations, self.dim):
            raise ValueError(f"expected (shots>=1, {self.rotations}, {self.dim}) features, got {feats.shape}")
        means = feats.mean(axis=0)
        if base_class_ids is None:
            base_class_ids = self.class_ids[self.task_ids == 0]
        if match_norm:
            base_norm = np.linalg.norm(self.means[self.indices_of(base_class_ids)], axis=-1).mean()
            means *= base_norm / np.linalg.norm(means, axis=-1, keepdims=True)
        source = most_similar_class(class_id, base_class_ids, embeddings)
        src = self.index_of(source)
        sigma = self.sigma[src].copy()
        if relative_variance:
            sigma *= np.linalg.norm(means, axis=-1).mean() / np.linalg.norm(self.means[src], axis=-1).mean()
        self.add_classes(task_id, [class_id], means[None], sigma[None])


def most_similar_class(class_id, candidates, embeddings: ClassEmbeddingTable) -> int:
    if class_id not in embeddings:
        raise MissingEmbedding(f"no embedding for class {class_id}")
    query = l2_normalize(embeddings[class_id])
    best, best_sim = None, -np.inf
    for cand in sorted(int(c) for c in candidates):
        sim = float(query @ l2_normalize(embeddings[cand]))
        if sim > best_sim:
            best, best_sim = cand, sim
    if best is None:
        raise ValueError("no candidate classes to copy a variance from")
    return best


def save_head(head: StochasticHead, path) -> None:
    parts = [_HEADER.pack(MAGIC, VERSION, head.rotations, head.n_classes, head.dim, head.eta)]
    for i in range(head.n_classes):
        parts.append(_CLASS.pack(int(head.class_ids[i]), int(head.task_ids[i])))
        parts.append(np.ascontiguousarray(head.means[i], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(head.sigma[i], dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_head(path) -> StochasticHead:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, m, n, d, eta = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    rec = _CLASS.size + 8 * (m * d + d)
    off = _HEADER.size
    if len(data) != off + n * rec:
        raise FormatError(f"expected {n} class records", min(len(data), off + n * rec))
    head = StochasticHead(d, m, eta)
    means = np.empty((n, m, d))
    sigma = np.empty((n, d))
    cids = np.empty(n, dtype=np.int64)
    tids = np.empty(n, dtype=np.int64)
    for i in range(n):
        cids[i], tids[i] = _CLASS.unpack_from(data, off)
        off += _CLASS.size
        means[i] = np.frombuffer(data, "<f8", m * d, off).reshape(m, d)
        off += 8 * m * d
        sigma[i] = np.frombuffer(data, "<f8", d, off)
        off += 8 * d
    head.means, head.sigma, head.class_ids, head.task_ids = means, sigma, cids, tids
    return head
