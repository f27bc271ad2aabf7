"""Frozen-backbone feature datasets, synthetic generation and B-m/Inc-n splits."""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng

MAGIC = b"MOTE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIBB")
# labels must stay representable as a signed 32-bit id (pool checkpoints use i32)
MAX_LABEL = 2**31 - 1
TRAIN_FRACTION = 0.8


class EmbeddingFormatError(ValueError):
    code = "format"


class BadMagicError(EmbeddingFormatError):
    code = "bad_magic"


class VersionMismatchError(EmbeddingFormatError):
    code = "version_mismatch"


class TruncatedPayloadError(EmbeddingFormatError):
    code = "truncated"


class LabelRangeError(EmbeddingFormatError):
    code = "label_out_of_range"


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingDataset:
    """Labeled feature vectors; ``msa`` holds the pre-FFN features used by parallel adapters."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    msa: np.ndarray | None = None
    split: np.ndarray | None = None  # 0 = train, 1 = test

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-d (n_samples, dim)")
        n, d = self.features.shape
        if self.labels.shape != (n,):
            raise ValueError("one label per sample required")
        if self.msa is not None:
            self.msa = np.ascontiguousarray(self.msa, dtype=np.float64)
            if self.msa.shape != (n, d):
                raise ValueError("msa features must match features in shape")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.uint8)
            if self.split.shape != (n,) or np.any(self.split > 1):
                raise ValueError("split flags must be 0/1, one per sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        if n and (self.labels.min() < 0 or self.labels.max() > MAX_LABEL):
            raise LabelRangeError("labels must lie in [0, 2^31-1]")

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def class_ids(self):
        return np.unique(self.labels)

    def __len__(self):
        return self.features.shape[0]

    def msa_or_features(self):
        # single-vector embeddings run the parallel path degenerately
        return self.features if self.msa is None else self.msa


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int
    dim: int
    samples_per_class: int
    rho: float = 10.0
    sigma: float = 1.0
    task_drift: float = 0.0
    drift_block: int = 0  # classes sharing one drift offset; 0 = all classes
    seed: int = 0
    name: str = "synthetic"

    def validate(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.task_drift < 0:
            raise ValueError("task_drift must be >= 0")
        if self.drift_block < 0:
            raise ValueError("drift_block must be >= 0")


def class_means(spec):
    """Class centres drawn uniformly on the sphere of radius ``rho`` (plus block drift)."""
    rng = SeededRng(spec.seed, (1,))
    raw = rng.normal(size=(spec.n_classes, spec.dim))
    means = spec.rho * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    if spec.task_drift > 0:
        block = spec.drift_block or spec.n_classes
        n_blocks = -(-spec.n_classes // block)
        drift_rng = SeededRng(spec.seed, (2,))
        offs = drift_rng.normal(size=(n_blocks, spec.dim))
        offs = spec.task_drift * offs / np.linalg.norm(offs, axis=1, keepdims=True)
        means = means + offs[np.arange(spec.n_classes) // block]
    return means


def random_rotation(dim, rng):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec):
    spec.validate()
    means = class_means(spec)
    noise_rng = SeededRng(spec.seed, (3,))
    k = spec.samples_per_class
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), k)
    noise = noise_rng.normal(scale=spec.sigma, size=(spec.n_classes * k, spec.dim))
    feats = means[labels] + noise
    rot = random_rotation(spec.dim, SeededRng(spec.seed, (4,)))
    msa = feats @ rot
    split = _seeded_split(labels, SeededRng(spec.seed, (5,)))
    return EmbeddingDataset(spec.name, feats, labels, msa=msa, split=split)


def _seeded_split(labels, rng):
    split = np.ones(labels.shape[0], dtype=np.uint8)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(np.floor(TRAIN_FRACTION * idx.size))
        if idx.size > 1:
            n_train = max(1, min(n_train, idx.size - 1))
        else:
            n_train = 1
        split[idx[:n_train]] = 0
    return split


# --------------------------------------------------------------------------
# protocol


@dataclass
class Protocol:
    base_classes: int
    increment: int
    class_order: tuple
    seed: int = 1993
    stage_manifests: tuple = ()

    def __post_init__(self):
        self.class_order = tuple(int(c) for c in self.class_order)
        if self.increment < 1:
            raise ProtocolError("increment must be >= 1")
        if self.base_classes < 0:
            raise ProtocolError("base_classes must be >= 0")
        if len(set(self.class_order)) != len(self.class_order):
            raise ProtocolError("class_order is not a permutation (duplicate ids)")
        n = len(self.class_order)
        rest = n - self.base_classes
        if rest < 0 or rest % self.increment != 0:
            raise ProtocolError(
                f"{n} classes are not expressible as B{self.base_classes} + k*Inc{self.increment}"
            )

    @classmethod
    def build(cls, class_ids, base, increment, seed, shuffle=True):
        ids = np.sort(np.asarray(class_ids, dtype=np.int64))
        if shuffle:
            ids = ids[SeededRng(seed, (11,)).permutation(ids.size)]
        return cls(base, increment, tuple(ids.tolist()), seed)

    def task_classes(self):
        order = list(self.class_order)
        first = self.base_classes or self.increment
        tasks = [order[:first]]
        i = first
        while i < len(order):
            tasks.append(order[i : i + self.increment])
            i += self.increment
        return tasks

    @property
    def n_tasks(self):
        return len(self.task_classes())


@dataclass
class Partition:
    features: np.ndarray
    msa: np.ndarray
    labels: np.ndarray
    ids: np.ndarray  # globally unique sample ids

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class TaskData:
    task_id: int
    classes: tuple
    train: Partition
    test: Partition
    source: str = ""
    extra: dict = field(default_factory=dict)


def _partition(ds, mask, label_offset, id_offset):
    idx = np.flatnonzero(mask)
    return Partition(
        features=ds.features[idx],
        msa=ds.msa_or_features()[idx],
        labels=ds.labels[idx] + label_offset,
        ids=idx.astype(np.int64) + id_offset,
    )


def make_splits(dataset, protocol, *, task_offset=0, label_offset=0, id_offset=0):
    """Cut ``dataset`` into the protocol's tasks, each with train/test partitions."""
    present = set(dataset.class_ids.tolist())
    missing = [c for c in protocol.class_order if c not in present]
    if missing:
        raise ProtocolError(f"protocol classes absent from dataset: {missing[:5]}")
    if dataset.split is None:
        split = _seeded_split(dataset.labels, SeededRng(protocol.seed, (12,)))
    else:
        split = dataset.split
    tasks = []
    for t, classes in enumerate(protocol.task_classes()):
        in_task = np.isin(dataset.labels, classes)
        tasks.append(
            TaskData(
                task_id=task_offset + t,
                classes=tuple(int(c) + label_offset for c in classes),
                train=_partition(dataset, in_task & (split == 0), label_offset, id_offset),
                test=_partition(dataset, in_task & (split == 1), label_offset, id_offset),
                source=dataset.name,
            )
        )
    return tasks


def concat_protocols(parts):
    """Chain ``(dataset, protocol)`` pairs into one task sequence with unique class ids."""
    if not parts:
        raise ProtocolError("no datasets given")
    dim = parts[0][0].dim
    tasks = []
    label_offset = 0
    id_offset = 0
    for ds, proto in parts:
        if ds.dim != dim:
            raise ProtocolError(f"dim mismatch: {ds.name} has {ds.dim}, expected {dim}")
        tasks.extend(
            make_splits(
                ds, proto, task_offset=len(tasks), label_offset=label_offset, id_offset=id_offset
            )
        )
        label_offset += int(ds.labels.max()) + 1
        id_offset += len(ds)
    return tasks


def load_manifest(path):
    """Read a protocol manifest: {name, base, increment, seed, datasets: [paths], shuffle?}."""
    path = Path(path)
    with open(path) as fh:
        m = json.load(fh)
    for key in ("base", "increment", "datasets"):
        if key not in m:
            raise ProtocolError(f"manifest missing field {key!r}")
    if not m["datasets"]:
        raise ProtocolError("manifest lists no datasets")
    m.setdefault("name", path.stem)
    m.setdefault("seed", 1993)
    m.setdefault("shuffle", True)
    m["datasets"] = [str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                     for p in m["datasets"]]
    return m


def tasks_from_manifest(manifest, seed=None):
    seed = manifest["seed"] if seed is None else seed
    parts = []
    for i, p in enumerate(manifest["datasets"]):
        ds = read_embeddings(p)
        base = manifest["base"] if i == 0 else 0
        proto = Protocol.build(ds.class_ids, base, manifest["increment"], seed, manifest["shuffle"])
        parts.append((ds, proto))
    return concat_protocols(parts)


# --------------------------------------------------------------------------
# binary embedding files


def write_embeddings(dataset, path):
    n, d = dataset.features.shape
    has_msa = dataset.msa is not None
    has_split = dataset.split is not None
    feats = dataset.features.astype("<f4")
    msa = dataset.msa.astype("<f4") if has_msa else None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, int(has_msa), int(has_split)))
        for i in range(n):
            fh.write(struct.pack("<I", int(dataset.labels[i])))
            if has_split:
                fh.write(struct.pack("<B", int(dataset.split[i])))
            fh.write(feats[i].tobytes())
            if has_msa:
                fh.write(msa[i].tobytes())


def read_embeddings(path, name=None):
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a MOTE embedding file")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, d, has_msa, has_split = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if has_msa > 1 or has_split > 1:
        raise EmbeddingFormatError(f"{path}: flag bytes must be 0 or 1")
    rec = 4 + has_split + 4 * d * (1 + has_msa)
    expected = _HEADER.size + n * rec
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise EmbeddingFormatError(f"{path}: {len(data) - expected} trailing bytes")
    fields = [("label", "<u4")]
    if has_split:
        fields.append(("split", "u1"))
    fields.append(("feat", "<f4", (d,)))
    if has_msa:
        fields.append(("msa", "<f4", (d,)))
    rows = np.frombuffer(data, dtype=np.dtype(fields), count=n, offset=_HEADER.size)
    labels = rows["label"].astype(np.int64)
    if n and labels.max() > MAX_LABEL:
        raise LabelRangeError(f"{path}: label {labels.max()} exceeds {MAX_LABEL}")
    split = None
    if has_split:
        split = rows["split"].copy()
        if np.any(split > 1):
            raise EmbeddingFormatError(f"{path}: split flag must be 0 or 1")
    return EmbeddingDataset(
        name or Path(path).stem,
        rows["feat"].astype(np.float64),
        labels,
        msa=rows["msa"].astype(np.float64) if has_msa else None,
        split=split,
    )
