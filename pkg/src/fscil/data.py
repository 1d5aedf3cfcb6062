"""Datasets, rotation transforms, FSCIL session plans and the ``.s3cd`` file format.

Images are float arrays shaped ``(channels, height, width)`` with values in
[0, 1]. A batch of images is ``(n, channels, height, width)``.

Dataset file layout (all integers little-endian)::

    magic        4 bytes  b"S3CD"
    version      u16      1
    channels     u16
    height       u16
    width        u16
    class_count  u32
    sample_count u32
    embedding_dim u32
    embeddings   class_count * embedding_dim * f32
    records      sample_count * (class_id u32, pixels channels*height*width f32)

Bit 31 of a record's ``class_id`` marks a test-split sample. Training records
are written before test records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, InsufficientClasses, MissingEmbedding, NonSquare
from .numerics import Rng

MAGIC = b"S3CD"
FORMAT_VERSION = 1
TEST_FLAG = 1 << 31
_HEADER = struct.Struct("<4sHHHHIII")

VARIANTS = ("standard", "im", "lb")


def rotate(img: np.ndarray, r: int) -> np.ndarray:
    """Rotate counter-clockwise by ``r * 90`` degrees over the last two axes."""
    img = np.asarray(img)
    if img.shape[-1] != img.shape[-2]:
        raise NonSquare(f"rotation needs a square image, got {img.shape[-2]}x{img.shape[-1]}")
    return np.rot90(img, k=r % 4, axes=(-2, -1))


def rotations(images: np.ndarray, m: int) -> np.ndarray:
    """Stack the first ``m`` rotations: ``(n, C, H, W) -> (n, m, C, H, W)``."""
    return np.stack([rotate(images, r) for r in range(m)], axis=1)


class ClassEmbeddingTable:
    """Fixed-dimension, nonzero embedding vector per class id."""

    def __init__(self, vectors):
        self.vectors = {int(k): np.asarray(v, dtype=np.float64) for k, v in dict(vectors).items()}
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"embeddings have mixed shapes {sorted(dims)}")
        for k, v in self.vectors.items():
            if not np.any(v):
                raise ValueError(f"embedding for class {k} is all zeros")

    @classmethod
    def from_array(cls, array) -> ClassEmbeddingTable:
        return cls({i: row for i, row in enumerate(np.asarray(array))})

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self.vectors

    def __getitem__(self, class_id) -> np.ndarray:
        try:
            return self.vectors[int(class_id)]
        except KeyError:
            raise MissingEmbedding(f"no embedding for class {class_id}") from None

    def __len__(self):
        return len(self.vectors)


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    embeddings: np.ndarray  # (class_count, embedding_dim), float32 values

    @property
    def class_count(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])

    def embedding_table(self) -> ClassEmbeddingTable:
        return ClassEmbeddingTable.from_array(self.embeddings)

    def __len__(self):
        return len(self.train_labels) + len(self.test_labels)


# --------------------------------------------------------------------------
# Synthetic data


@dataclass
class GeneratorConfig:
    classes: int = 18
    train_per_class: int = 100
    test_per_class: int = 20
    channels: int = 1
    size: int = 16
    latent_dim: int = 12
    class_scale: float = 1.0
    within_class_std: float = 0.8
    pixel_noise: float = 0.35
    pattern_smoothing: float = 1.2
    orientation_strength: float = 1.0


def _smooth_patterns(rng: Rng, count: int, channels: int, size: int, smoothing: float) -> np.ndarray:
    raw = rng.normal((count, channels, size, size))
    out = np.empty_like(raw)
    for i in range(count):
        for c in range(channels):
            out[i, c] = gaussian_filter(raw[i, c], smoothing, mode="reflect")
    out /= np.linalg.norm(out.reshape(count, -1), axis=1).reshape(count, 1, 1, 1)
    return out * size  # per-pixel RMS of about 1


def _orientation_pattern(channels: int, size: int) -> np.ndarray:
    # bright top edge plus an off-centre blob: every 90-degree turn is distinguishable
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    gradient = 1.0 - 2.0 * ys
    blob = np.exp(-((ys - 0.25) ** 2 + (xs - 0.2) ** 2) / 0.02)
    pattern = gradient + 1.5 * blob
    return np.broadcast_to(pattern - pattern.mean(), (channels, size, size)).copy()


def generate_synthetic(cfg: GeneratorConfig, rng: Rng) -> Dataset:
    """Render Gaussian latent blobs as oriented images.

    Each class has a latent mean; a sample draws a latent code around it and
    renders ``sigmoid(sum_j z_j * pattern_j + orientation + noise)``. Class
    latent means double as class embeddings.
    """
    if cfg.classes < 2 or cfg.train_per_class < 1:
        raise ValueError("need at least 2 classes and 1 training sample per class")
    c, s, k = cfg.channels, cfg.size, cfg.latent_dim
    patterns = _smooth_patterns(rng, k, c, s, cfg.pattern_smoothing)
    orient = cfg.orientation_strength * _orientation_pattern(c, s)
    means = cfg.class_scale * rng.normal((cfg.classes, k))

    def render(count):
        labels = np.repeat(np.arange(cfg.classes), count)
        z = means[labels] + cfg.within_class_std * rng.normal((labels.size, k))
        field_ = np.tensordot(z, patterns, axes=(1, 0)) / np.sqrt(k)
        field_ = field_ + orient + cfg.pixel_noise * rng.normal(field_.shape)
        pixels = 1.0 / (1.0 + np.exp(-field_))
        return pixels.astype(np.float32), labels.astype(np.int64)

    train_x, train_y = render(cfg.train_per_class)
    test_x, test_y = render(cfg.test_per_class)
    return Dataset(train_x, train_y, test_x, test_y, means.astype(np.float32))


def nearest_centroid_accuracy(ds: Dataset) -> float:
    """Pixel-space nearest-centroid test accuracy; a separability check."""
    flat = ds.train_images.reshape(len(ds.train_labels), -1).astype(np.float64)
    classes = np.unique(ds.train_labels)
    cents = np.stack([flat[ds.train_labels == c].mean(axis=0) for c in classes])
    test = ds.test_images.reshape(len(ds.test_labels), -1).astype(np.float64)
    d2 = ((test[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == ds.test_labels))


# --------------------------------------------------------------------------
# File format


def save_dataset(ds: Dataset, path) -> None:
    c, h, w = ds.image_shape
    n = len(ds)
    emb = np.ascontiguousarray(ds.embeddings, dtype="<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, c, h, w, ds.class_count, n, emb.shape[1])
    rec = np.dtype([("class_id", "<u4"), ("pixels", "<f4", (c * h * w,))])
    records = np.empty(n, dtype=rec)
    ntr = len(ds.train_labels)
    records["class_id"][:ntr] = ds.train_labels
    records["class_id"][ntr:] = np.asarray(ds.test_labels, dtype=np.uint32) | TEST_FLAG
    records["pixels"][:ntr] = ds.train_images.reshape(ntr, -1)
    records["pixels"][ntr:] = ds.test_images.reshape(n - ntr, -1)
    with open(path, "wb") as f:
        f.write(header)
        f.write(emb.tobytes())
        f.write(records.tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, c, h, w, n_cls, n, e_dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if h != w or c == 0 or h == 0:
        raise FormatError(f"bad image dims {c}x{h}x{w}", 6)
    off = _HEADER.size
    emb_bytes = n_cls * e_dim * 4
    if len(data) < off + emb_bytes:
        raise FormatError("truncated embeddings", len(data))
    emb = np.frombuffer(data, dtype="<f4", count=n_cls * e_dim, offset=off).reshape(n_cls, e_dim)
    off += emb_bytes
    rec = np.dtype([("class_id", "<u4"), ("pixels", "<f4", (c * h * w,))])
    expected = off + n * rec.itemsize
    if len(data) < expected:
        have = (len(data) - off) // rec.itemsize
        raise FormatError(f"truncated records: header says {n}, found {have}", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after last record", expected)
    records = np.frombuffer(data, dtype=rec, count=n, offset=off)
    raw = records["class_id"]
    is_test = (raw & TEST_FLAG) != 0
    labels = (raw & ~np.uint32(TEST_FLAG)).astype(np.int64)
    if labels.size and labels.max() >= n_cls:
        bad = int(np.argmax(labels >= n_cls))
        raise FormatError(f"class id {labels[bad]} out of range", off + bad * rec.itemsize)
    pixels = records["pixels"].reshape(n, c, h, w).astype(np.float32)
    return Dataset(
        pixels[~is_test], labels[~is_test], pixels[is_test], labels[is_test],
        emb.astype(np.float32),
    )


# --------------------------------------------------------------------------
# Session protocol


@dataclass
class ProtocolConfig:
    base_classes: int = 60
    tasks: int = 8
    ways: int = 5
    shots: int = 5
    shot_list: list[int] | None = None
    variant: str = "standard"
    seed: int = 0
    base_shots: int | None = None  # None: every training sample of a base class
    lb_base_classes: int | None = None  # None: 40% of the class budget
    class_budget: int | None = None  # None: base_classes + tasks * ways
    rotations: int = 4


@dataclass
class Task:
    task_id: int
    class_ids: list[int]
    shots: list[int | None]


@dataclass
class SessionPlan:
    tasks: list[Task]
    variant: str = "standard"
    rotation_count: int = 4

    @property
    def base_classes(self) -> int:
        return len(self.tasks[0].class_ids)

    @property
    def all_classes(self) -> list[int]:
        return [c for t in self.tasks for c in t.class_ids]

    def classes_up_to(self, t: int) -> list[int]:
        return [c for task in self.tasks[: t + 1] for c in task.class_ids]

    def task_of(self) -> dict[int, int]:
        return {c: t.task_id for t in self.tasks for c in t.class_ids}

    def validate(self) -> None:
        seen = self.all_classes
        if len(seen) != len(set(seen)):
            raise ValueError("label spaces of tasks overlap")
        base = self.tasks[0].shots
        if all(s is not None for s in base):
            lo = min(base)
            for t in self.tasks[1:]:
                if any(s > lo for s in t.shots):
                    raise ValueError("incremental task has more shots than the base task")


def build_sessions(cfg: ProtocolConfig) -> SessionPlan:
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    if cfg.variant == "im":
        shot_list = list(cfg.shot_list or [5, 4, 3, 2, 1])
        ways = len(shot_list)
    else:
        shot_list = list(cfg.shot_list) if cfg.shot_list else [cfg.shots] * cfg.ways
        ways = len(shot_list)
    needed = cfg.base_classes + cfg.tasks * ways
    budget = cfg.class_budget if cfg.class_budget is not None else needed
    if budget < needed:
        raise InsufficientClasses(f"protocol needs {needed} classes, budget is {budget}")

    n_base = cfg.base_classes
    if cfg.variant == "lb":
        n_base = cfg.lb_base_classes if cfg.lb_base_classes is not None else int(round(0.4 * budget))
        if not 1 <= n_base <= cfg.base_classes:
            raise ValueError(f"lb base classes must be in [1, {cfg.base_classes}], got {n_base}")

    tasks = [Task(0, list(range(n_base)), [cfg.base_shots] * n_base)]
    # incremental classes start after the standard base block in every variant
    for t in range(cfg.tasks):
        start = cfg.base_classes + t * ways
        tasks.append(Task(t + 1, list(range(start, start + ways)), list(shot_list)))
    plan = SessionPlan(tasks, cfg.variant, cfg.rotations)
    plan.validate()
    return plan


def task_samples(ds: Dataset, task: Task, rng: Rng | None = None):
    """Training images and labels for one task, honouring its shot counts.

    Shots are the first k entries of a seeded permutation of each class's
    training indices (first k in file order if ``rng`` is None).
    """
    idx = []
    for cid, shots in zip(task.class_ids, task.shots):
        members = np.flatnonzero(ds.train_labels == cid)
        if members.size == 0:
            raise InsufficientClasses(f"dataset has no training samples for class {cid}")
        if rng is not None and shots is not None:
            members = members[rng.permutation(members.size)]
        if shots is not None:
            if shots > members.size:
                raise ValueError(f"class {cid} has {members.size} samples, {shots} requested")
            members = np.sort(members[:shots])
        idx.append(members)
    idx = np.concatenate(idx)
    return ds.train_images[idx].astype(np.float64), ds.train_labels[idx], idx


def test_samples(ds: Dataset, class_ids):
    mask = np.isin(ds.test_labels, list(class_ids))
    return ds.test_images[mask].astype(np.float64), ds.test_labels[mask]


# --------------------------------------------------------------------------
# Protocol config files


_INT_KEYS = {"base_classes", "tasks", "ways", "shots", "seed", "base_shots",
             "lb_base_classes", "class_budget", "rotations"}


def parse_protocol(text: str) -> ProtocolConfig:
    """Parse ``key = value`` lines (``#`` comments) into a :class:`ProtocolConfig`."""
    cfg = ProtocolConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in _INT_KEYS:
            setattr(cfg, key, None if value.lower() == "none" else int(value))
        elif key == "shot_list":
            cfg.shot_list = [int(v) for v in value.replace("{", "").replace("}", "").split(",") if v.strip()]
        elif key == "variant":
            cfg.variant = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return cfg


def load_protocol(path) -> ProtocolConfig:
    return parse_protocol(Path(path).read_text())


def format_protocol(cfg: ProtocolConfig) -> str:
    lines = []
    for key in ("base_classes", "tasks", "ways", "shots", "variant", "seed",
                "base_shots", "lb_base_classes", "class_budget", "rotations"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    if cfg.shot_list:
        lines.append("shot_list = " + ",".join(str(s) for s in cfg.shot_list))
    return "\n".join(lines) + "\n"
