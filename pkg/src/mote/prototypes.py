"""Class prototypes (mean adapted features) and the prototype pool."""
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

MERGED = -1
POOL_MAGIC = b"MOTP"
POOL_VERSION = 1
MERGE_MODES = ("normalized", "softmax", "raw")


class PoolError(ValueError):
    pass


@dataclass
class Prototype:
    class_id: int
    task_id: int
    vector: np.ndarray
    origin: int  # expert task id, or MERGED

    def __post_init__(self):
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise PoolError(f"prototype {self.class_id} has non-finite entries")
        if not np.linalg.norm(self.vector) > 0:
            raise PoolError(f"prototype {self.class_id} has zero norm")


class PrototypePool:
    """One prototype per class, plus each expert's filtering scope."""

    def __init__(self):
        self.prototypes = {}
        self.task_of = {}
        self.scope_of = {}
        self._cache = None

    def __len__(self):
        return len(self.prototypes)

    def __contains__(self, class_id):
        return class_id in self.prototypes

    def __getitem__(self, class_id):
        return self.prototypes[class_id]

    def add(self, proto):
        if proto.class_id in self.prototypes:
            raise PoolError(f"class {proto.class_id} already has a prototype")
        if self.prototypes:
            d = next(iter(self.prototypes.values())).vector.shape[0]
            if proto.vector.shape[0] != d:
                raise PoolError("prototype dim mismatch")
        self.prototypes[proto.class_id] = proto
        self.task_of[proto.class_id] = proto.task_id
        self._cache = None

    def extend(self, protos):
        for p in sorted(protos, key=lambda p: p.class_id):
            self.add(p)

    def add_scope(self, expert_id, classes):
        self.scope_of.setdefault(expert_id, set()).update(int(c) for c in classes)
        self._cache = None

    def arrays(self):
        """(class_ids ascending, prototype matrix, task ids) for vectorised lookups."""
        if self._cache is None:
            ids = np.array(sorted(self.prototypes), dtype=np.int64)
            mat = np.array([self.prototypes[c].vector for c in ids.tolist()], dtype=np.float64)
            tasks = np.array([self.task_of[c] for c in ids.tolist()], dtype=np.int64)
            if not len(ids):
                mat = np.zeros((0, 0))
            self._cache = (ids, np.ascontiguousarray(mat), tasks)
        return self._cache

    def scope_mask(self, expert_id):
        ids = self.arrays()[0]
        return np.isin(ids, sorted(self.scope_of.get(expert_id, ())))

    @property
    def dim(self):
        if not self.prototypes:
            return 0
        return next(iter(self.prototypes.values())).vector.shape[0]

    def nbytes(self, bytes_per_weight=4):
        return len(self) * self.dim * bytes_per_weight

    def to_bytes(self):
        ids = sorted(self.prototypes)
        out = [struct.pack("<4sIII", POOL_MAGIC, POOL_VERSION, self.dim, len(ids))]
        for c in ids:
            p = self.prototypes[c]
            out.append(struct.pack("<IIi", c, p.task_id, p.origin))
            out.append(p.vector.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != POOL_MAGIC:
            raise PoolError("not a prototype pool checkpoint")
        if len(data) < 16:
            raise PoolError("truncated pool checkpoint")
        _, version, d, count = struct.unpack_from("<4sIII", data, 0)
        if version != POOL_VERSION:
            raise PoolError(f"pool checkpoint version {version} unsupported")
        rec = 12 + 8 * d
        if len(data) != 16 + count * rec:
            raise PoolError("pool checkpoint size does not match its header")
        pool = cls()
        origins = set()
        merged = []
        for i in range(count):
            off = 16 + i * rec
            c, t, origin = struct.unpack_from("<IIi", data, off)
            vec = np.frombuffer(data, "<f8", d, off + 12).copy()
            pool.add(Prototype(c, t, vec, origin))
            if origin == MERGED:
                merged.append(c)
            else:
                origins.add(origin)
                pool.add_scope(origin, [c])
        for e in origins:
            pool.add_scope(e, merged)
        return pool

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _class_means(expert, part, classes):
    feats = expert.forward(part.features, part.msa)
    means = {}
    for c in classes:
        rows = feats[part.labels == c]
        if rows.shape[0] == 0:
            raise PoolError(f"class {c} has no training samples")
        means[c] = rows.mean(axis=0)
    return means


def compute_prototypes(expert, train, task_id=None):
    """Mean adapted training feature of every class in the expert's scope."""
    if not expert.trained:
        raise PoolError(f"expert {expert.task_id} is not trained")
    extra = set(np.unique(train.labels).tolist()) - expert.scope
    if extra:
        raise PoolError(f"training data holds classes outside the expert scope: {sorted(extra)[:5]}")
    task_id = expert.task_id if task_id is None else task_id
    means = _class_means(expert, train, sorted(expert.scope))
    return [Prototype(c, task_id, v, expert.task_id) for c, v in means.items()]


def merge_weights(sims, mode="normalized"):
    sims = np.asarray(sims, dtype=np.float64)
    if mode == "normalized":
        pos = np.maximum(sims, 0.0)
        total = pos.sum()
        if total <= 0:
            return np.full(sims.shape, 1.0 / sims.size)
        return pos / total
    if mode == "softmax":
        e = np.exp(sims - sims.max())
        return e / e.sum()
    if mode == "raw":
        return sims.copy()
    raise ValueError(f"unknown merge mode {mode!r}")


def synthesize_overflow_prototypes(experts, pool, train, task_id, merge="normalized"):
    """Prototypes for a task that gets no expert of its own.

    Each expert contributes its own class mean, weighted by how closely that
    mean matches the best prototype already in the expert's training scope.
    Every new class then joins every expert's filtering scope.
    """
    if not experts:
        raise PoolError("overflow synthesis needs at least one trained expert")
    if any(not e.trained for e in experts):
        raise PoolError("overflow synthesis needs trained experts")
    experts = sorted(experts, key=lambda e: e.task_id)
    classes = sorted(int(c) for c in np.unique(train.labels))
    clash = [c for c in classes if c in pool]
    if clash:
        raise PoolError(f"classes already in pool: {clash[:5]}")
    ids, mat, _ = pool.arrays()
    per_expert = [_class_means(e, train, classes) for e in experts]
    protos = []
    for c in classes:
        cand = np.array([m[c] for m in per_expert])
        best = np.empty(len(experts))
        for k, e in enumerate(experts):
            own = np.isin(ids, sorted(e.scope))
            sims = kernels.cosine_sims(cand[k : k + 1], mat[own])
            best[k] = sims.max() if sims.size else 0.0
        u = merge_weights(best, merge)
        merged = np.zeros(cand.shape[1])
        for k in range(len(experts)):
            merged += u[k] * cand[k]
        protos.append(Prototype(c, task_id, merged, MERGED))
    return protos


def add_overflow_task(experts, pool, train, task_id, merge="normalized"):
    """Synthesize the task's prototypes, insert them, and widen every expert's scope."""
    protos = synthesize_overflow_prototypes(experts, pool, train, task_id, merge)
    pool.extend(protos)
    new = [p.class_id for p in protos]
    for e in experts:
        pool.add_scope(e.task_id, new)
    return protos
