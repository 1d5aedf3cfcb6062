"""Per-class feature prototypes and their on-disk store.

File layout (little-endian)::

    magic b"S3CP" | version u16 | dtype u8 (4 = f32, 8 = f64) | count u32 | d u32 | fingerprint u64
    count * (class_id u32 | task_id u16 | d values)
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backbone import FeatureExtractor
from .errors import DuplicateClass, EmptyClass, FingerprintMismatch, FormatError

MAGIC = b"S3CP"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIQ")
_ENTRY = struct.Struct("<IH")


def compute_prototypes(extractor: FeatureExtractor, images, labels, class_ids=None,
                       sample_ids=None) -> list[tuple[int, np.ndarray]]:
    """Mean 0-degree feature per class, summed in ascending ``sample_ids`` order."""
    labels = np.asarray(labels)
    order = np.argsort(sample_ids, kind="stable") if sample_ids is not None else np.arange(len(labels))
    labels = labels[order]
    feats = extractor.features(np.asarray(images, dtype=np.float64)[order]) if len(labels) else None
    if class_ids is None:
        class_ids = np.unique(labels)
    out = []
    for cid in class_ids:
        rows = labels == cid
        if not np.any(rows):
            raise EmptyClass(f"class {cid} has no samples")
        out.append((int(cid), feats[rows].sum(axis=0) / rows.sum()))
    return out


@dataclass
class PrototypeStore:
    dim: int
    fingerprint: int = 0
    entries: dict[int, tuple[int, np.ndarray]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, class_id):
        return int(class_id) in self.entries

    def update(self, task_id: int, prototypes) -> PrototypeStore:
        """Add new classes in place; existing entries are never overwritten."""
        prototypes = list(prototypes)
        for cid, _ in prototypes:
            if int(cid) in self.entries:
                raise DuplicateClass(f"class {cid} already has a prototype")
        for cid, vec in prototypes:
            vec = np.array(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"prototype for class {cid} has shape {vec.shape}")
            self.entries[int(cid)] = (int(task_id), vec)
        return self

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(class ids, prototype matrix) in ascending class id order."""
        ids = np.array(sorted(self.entries), dtype=np.int64)
        if ids.size == 0:
            return ids, np.zeros((0, self.dim))
        return ids, np.stack([self.entries[int(c)][1] for c in ids])

    def check_fingerprint(self, extractor: FeatureExtractor) -> bool:
        if self.fingerprint != extractor.fingerprint():
            warnings.warn("prototypes were computed with a different extractor", FingerprintMismatch)
            return False
        return True


def update_store(store: PrototypeStore, task_id: int, prototypes) -> PrototypeStore:
    return store.update(task_id, prototypes)


def save_store(store: PrototypeStore, path, dtype: str = "f8") -> None:
    code = {"f4": 4, "f8": 8}[dtype]
    parts = [_HEADER.pack(MAGIC, VERSION, code, len(store), store.dim, store.fingerprint)]
    for cid in sorted(store.entries):
        task, vec = store.entries[cid]
        parts.append(_ENTRY.pack(cid, task))
        parts.append(np.ascontiguousarray(vec, dtype="<" + dtype).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_store(path, extractor: FeatureExtractor | None = None) -> PrototypeStore:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, code, count, dim, fp = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION or code not in (4, 8):
        raise FormatError(f"unsupported version/dtype {version}/{code}", 4)
    rec = _ENTRY.size + code * dim
    off = _HEADER.size
    if len(data) < off + count * rec:
        raise FormatError(f"truncated: header says {count} prototypes", len(data))
    if len(data) > off + count * rec:
        raise FormatError("trailing bytes", off + count * rec)
    store = PrototypeStore(dim, fp)
    for _ in range(count):
        cid, task = _ENTRY.unpack_from(data, off)
        off += _ENTRY.size
        vec = np.frombuffer(data, "<f4" if code == 4 else "<f8", dim, off).astype(np.float64)
        off += code * dim
        if cid in store.entries:
            raise FormatError(f"duplicate class {cid}", off - rec)
        store.entries[cid] = (task, vec)
    if extractor is not None:
        store.check_fingerprint(extractor)
    return store
