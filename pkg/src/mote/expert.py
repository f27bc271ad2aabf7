"""Task-specific adapter experts and their cross-entropy training."""
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import SeededRng

SEQ = "seq"
PAR = "par"
_MODES = {SEQ: 0, PAR: 1}
CKPT_MAGIC = b"MOTX"
CKPT_VERSION = 1
INIT_STD = 0.02


class ExpertError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    weight_decay: float = 0.005
    epochs: int = 20
    batch_size: int = 48
    momentum: float = 0.9
    seed: int = 1993
    rank: int = 16
    mode: str = PAR

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {sorted(_MODES)}")


@dataclass
class AdapterExpert:
    task_id: int
    scope: frozenset
    w_down: np.ndarray  # (d, r)
    w_up: np.ndarray  # (r, d)
    mode: str = SEQ
    trained: bool = False
    train_log: list = field(default_factory=list, repr=False)
    train_accuracy: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.scope = frozenset(int(c) for c in self.scope)
        self.w_down = np.ascontiguousarray(self.w_down, dtype=np.float64)
        self.w_up = np.ascontiguousarray(self.w_up, dtype=np.float64)
        d, r = self.w_down.shape
        if self.w_up.shape != (r, d):
            raise ExpertError(f"w_up must be ({r}, {d}), got {self.w_up.shape}")
        if not 1 <= r < d:
            raise ExpertError(f"bottleneck r={r} must satisfy 1 <= r < d={d}")
        if self.mode not in _MODES:
            raise ExpertError(f"unknown mode {self.mode!r}")

    @classmethod
    def create(cls, task_id, scope, dim, rank, mode=SEQ, rng=None):
        """Fresh expert: W_down ~ N(0, 0.02^2), W_up = 0, so it starts as the identity."""
        rng = rng or SeededRng(0)
        if not 1 <= rank < dim:
            raise ExpertError(f"bottleneck r={rank} must satisfy 1 <= r < d={dim}")
        w_down = rng.normal(0.0, INIT_STD, size=(dim, rank))
        return cls(task_id, scope, w_down, np.zeros((rank, dim)), mode)

    @property
    def dim(self):
        return self.w_down.shape[0]

    @property
    def rank(self):
        return self.w_down.shape[1]

    @property
    def n_params(self):
        return self.w_down.size + self.w_up.size

    def forward(self, h_out, h_msa=None):
        """Adapted features for a batch (n, d) or a single vector (d,)."""
        single = np.ndim(h_out) == 1
        h_out = np.atleast_2d(np.asarray(h_out, dtype=np.float64))
        h_msa = h_out if h_msa is None else np.atleast_2d(np.asarray(h_msa, dtype=np.float64))
        if h_out.shape[1] != self.dim or h_msa.shape != h_out.shape:
            raise ExpertError(f"input dim {h_out.shape[1]} does not match expert dim {self.dim}")
        out = kernels.adapter_forward(h_out, h_msa, self.w_down, self.w_up, self.mode == PAR)
        return out[0] if single else out

    def state_bytes(self):
        return to_bytes(self)


def adapter_forward(expert, h_out, h_msa=None):
    return expert.forward(h_out, h_msa)


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (c, d)
    bias: np.ndarray  # (c,)

    @classmethod
    def create(cls, n_classes, dim, rng):
        return cls(rng.normal(0.0, INIT_STD, size=(n_classes, dim)), np.zeros(n_classes))

    @property
    def n_classes(self):
        return self.weight.shape[0]


@dataclass
class Grads:
    w_down: np.ndarray
    w_up: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray


def ce_loss_and_grads(expert, head, h_out, h_msa, targets):
    """Mean softmax cross-entropy of ``head(expert(x))`` and its analytic gradients.

    ``targets`` are head row indices (0..c-1), not class ids.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    if n == 0:
        raise ExpertError("empty batch")
    if targets.min() < 0 or targets.max() >= head.n_classes:
        raise ExpertError("label out of head range")
    h_out = np.asarray(h_out, dtype=np.float64)
    src = np.asarray(h_msa, dtype=np.float64) if expert.mode == PAR else h_out

    pre = kernels.matmul(src, expert.w_down)
    hidden = np.maximum(pre, 0.0)
    feats = h_out + kernels.matmul(hidden, expert.w_up)
    if expert.mode == PAR:
        feats = feats + src
    logits = kernels.matmul(feats, head.weight.T) + head.bias

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, targets]))

    g_logits = np.exp(logp)
    g_logits[rows, targets] -= 1.0
    g_logits /= n
    g_head_w = kernels.matmul(g_logits.T, feats)
    g_head_b = g_logits.sum(axis=0)
    g_feats = kernels.matmul(g_logits, head.weight)
    g_w_up = kernels.matmul(hidden.T, g_feats)
    g_pre = kernels.matmul(g_feats, expert.w_up.T) * (pre > 0.0)
    g_w_down = kernels.matmul(src.T, g_pre)
    return loss, Grads(g_w_down, g_w_up, g_head_w, g_head_b)


def cosine_anneal_lr(step, total_steps, lr0):
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def train_task(expert, train, config, rng=None):
    """Fit ``expert`` on one task's training partition; the head is built here and thrown away.

    ``train`` needs ``features``, ``msa`` and ``labels`` arrays (a ``Partition``).
    """
    if expert.trained:
        raise ExpertError(f"expert {expert.task_id} is already trained")
    labels = np.asarray(train.labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise ExpertError("empty training set")
    classes = sorted(expert.scope)
    index = {c: i for i, c in enumerate(classes)}
    try:
        targets = np.array([index[int(y)] for y in labels], dtype=np.int64)
    except KeyError as exc:
        raise ExpertError(f"label {exc.args[0]} outside expert scope") from None
    rng = rng or SeededRng(config.seed, (expert.task_id,))
    head = ClassifierHead.create(len(classes), expert.dim, rng.child(0))
    h_out = np.ascontiguousarray(train.features, dtype=np.float64)
    h_msa = np.ascontiguousarray(train.msa, dtype=np.float64)

    params = [expert.w_down, expert.w_up, head.weight, head.bias]
    decays = [True, True, True, False]
    velocity = [np.zeros_like(p) for p in params]
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    log = []
    for epoch in range(config.epochs):
        order = rng.child(1, epoch).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            loss, g = ce_loss_and_grads(expert, head, h_out[idx], h_msa[idx], targets[idx])
            losses.append(loss)
            lr = cosine_anneal_lr(step, total, config.lr0)
            for p, v, grad, decay in zip(params, velocity, (g.w_down, g.w_up, g.head_w, g.head_b), decays):
                if decay:
                    p -= lr * config.weight_decay * p
                v *= config.momentum
                v += grad
                p -= lr * v
            step += 1
        log.append(float(np.mean(losses)))
    feats = expert.forward(h_out, h_msa)
    expert.train_accuracy = float(np.mean(np.argmax(feats @ head.weight.T + head.bias, axis=1) == targets))
    expert.trained = True
    expert.train_log = log
    return expert


# --------------------------------------------------------------------------
# checkpoints

_CKPT_HEAD = struct.Struct("<4sIIIIB")


def to_bytes(expert):
    scope = sorted(expert.scope)
    parts = [
        _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, expert.task_id, expert.dim, expert.rank,
                        _MODES[expert.mode]),
        struct.pack(f"<I{len(scope)}I", len(scope), *scope),
        expert.w_down.astype("<f8").tobytes(),
        expert.w_up.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def from_bytes(data):
    if data[:4] != CKPT_MAGIC:
        raise ExpertError("not an expert checkpoint")
    if len(data) < _CKPT_HEAD.size + 4:
        raise ExpertError("truncated expert checkpoint")
    _, version, task_id, d, r, mode = _CKPT_HEAD.unpack_from(data, 0)
    if version != CKPT_VERSION:
        raise ExpertError(f"expert checkpoint version {version} unsupported")
    off = _CKPT_HEAD.size
    (n_scope,) = struct.unpack_from("<I", data, off)
    off += 4
    need = off + 4 * n_scope + 8 * 2 * d * r
    if len(data) != need:
        raise ExpertError(f"expert checkpoint size {len(data)} != {need}")
    scope = struct.unpack_from(f"<{n_scope}I", data, off)
    off += 4 * n_scope
    w_down = np.frombuffer(data, "<f8", d * r, off).reshape(d, r)
    off += 8 * d * r
    w_up = np.frombuffer(data, "<f8", d * r, off).reshape(r, d)
    mode_name = {v: k for k, v in _MODES.items()}.get(mode)
    if mode_name is None:
        raise ExpertError(f"unknown mode byte {mode}")
    return AdapterExpert(task_id, scope, w_down.copy(), w_up.copy(), mode_name, trained=True)


def save_expert(expert, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(expert))


def load_expert(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
