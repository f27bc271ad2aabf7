"""End-to-end class-incremental runs and the metrics reported on them."""
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .dataset import Protocol, SyntheticSpec, generate_synthetic, make_splits
from .expert import AdapterExpert, train_task
from .inference import InferenceConfig, predict_batch
from .numerics import SeededRng
from .prototypes import MERGED, PrototypePool, add_overflow_task, compute_prototypes

SCHEMA_VERSION = 1
WARMUP = 10
MIN_TIMED = 100


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# metrics


def avg_accuracy(matrix, stage):
    """Mean of row ``stage`` (0-based) over tasks 0..stage."""
    row = matrix[stage]
    if len(row) < stage + 1 or any(v is None or (isinstance(v, float) and math.isnan(v))
                                   for v in row[: stage + 1]):
        raise MetricError(f"row {stage} is incomplete")
    total = 0.0
    for j in range(stage + 1):
        total += row[j]
    return total / (stage + 1)


def forgetting(matrix, task, stage):
    """Drop of task ``task`` at ``stage`` from its best earlier accuracy."""
    return max(matrix[i][task] - matrix[stage][task] for i in range(task, stage))


def avg_forgetting(matrix, stage):
    if stage < 1:
        raise MetricError("average forgetting needs at least two stages")
    total = 0.0
    for j in range(stage):
        total += forgetting(matrix, j, stage)
    return total / stage


def task_identify_accuracy(pred_tasks, true_tasks):
    pred_tasks = np.asarray(pred_tasks)
    true_tasks = np.asarray(true_tasks)
    if pred_tasks.size == 0:
        raise MetricError("no predictions")
    return float(np.mean(pred_tasks == true_tasks))


@dataclass
class MemoryReport:
    adapter_bytes: int
    prototype_bytes: int
    n_experts: int
    n_prototypes: int
    n_adapter_params: int
    counterfactual_prototypes: int
    bytes_per_weight: int = 4

    @property
    def prototype_ratio(self):
        if not self.counterfactual_prototypes:
            return 0.0
        return self.n_prototypes / self.counterfactual_prototypes

    def as_dict(self):
        d = asdict(self)
        d["prototype_ratio"] = self.prototype_ratio
        return d


def memory_report(experts, pool, bytes_per_weight=4):
    params = sum(e.n_params for e in experts)
    return MemoryReport(
        adapter_bytes=params * bytes_per_weight,
        prototype_bytes=pool.nbytes(bytes_per_weight),
        n_experts=len(experts),
        n_prototypes=len(pool),
        n_adapter_params=params,
        counterfactual_prototypes=len(experts) * len(pool),
        bytes_per_weight=bytes_per_weight,
    )


def timing_report(experts, pool, h_out, h_msa, config, warmup=WARMUP):
    """Per-sample wall clock of single-sample prediction (first ``warmup`` calls discarded)."""
    n = h_out.shape[0] - warmup
    if n < MIN_TIMED:
        raise MetricError(f"timing needs at least {MIN_TIMED} samples after warmup, got {n}")
    times = []
    for i in range(h_out.shape[0]):
        t0 = time.perf_counter()
        predict_batch(h_out[i : i + 1], h_msa[i : i + 1], experts, pool, config)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    times = np.array(times)
    return {
        "mean": float(times.mean()),
        "median": float(np.median(times)),
        "p95": float(np.percentile(times, 95)),
        "n": int(times.size),
        "warmup": warmup,
        "backend": kernels.BACKEND,
    }


@dataclass
class RunMetrics:
    matrix: list
    avg_curve: list
    final_avg: float
    last_union: float
    last_task: float
    af: float | None
    af_curve: list
    tia_curve: list
    cumulative_curve: list
    avg_incremental: float
    seed: int
    config: dict
    stage_origins: list = field(default_factory=list)
    wall_clock_per_sample: float | None = None
    timing: dict | None = None

    @property
    def last(self):
        return self.last_union

    @property
    def tia(self):
        return self.tia_curve[-1]

    def as_dict(self, include_timing=True):
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["last"] = self.last_union
        if not include_timing:
            d.pop("wall_clock_per_sample")
            d.pop("timing")
        return d

    def to_json(self, include_timing=True):
        return json.dumps(self.as_dict(include_timing), indent=2, sort_keys=True)

    def csv_rows(self):
        rows = []
        for t in range(len(self.matrix)):
            rows.append({
                "stage": t + 1,
                "avg": self.avg_curve[t],
                "af": "" if self.af_curve[t] is None else self.af_curve[t],
                "tia": self.tia_curve[t],
                "last": self.cumulative_curve[t],
            })
        return rows


@dataclass
class RunResult:
    metrics: RunMetrics
    memory: MemoryReport
    experts: list
    pool: PrototypePool
    predictions: dict = field(default_factory=dict)


def run_protocol(tasks, train_config, inference_config, adapter_limit=None, seed=1993,
                 merge="normalized", timing_samples=0, keep_predictions=False):
    """Train and evaluate stage by stage.

    ``tasks`` may be any iterable of ``TaskData``; only each stage's test
    partition is retained once the stage's expert and prototypes exist.
    """
    if adapter_limit is not None and adapter_limit < 1:
        raise ValueError("adapter limit must be >= 1 (or None for unlimited)")
    experts = []
    pool = PrototypePool()
    tests = []
    matrix = []
    tia_curve, cum_curve, origins = [], [], []
    predictions = {}
    t_eval = 0.0
    n_eval = 0
    for stage, task in enumerate(tasks):
        if adapter_limit is None or len(experts) < adapter_limit:
            expert = AdapterExpert.create(
                task.task_id, task.classes, task.train.features.shape[1], train_config.rank,
                train_config.mode, rng=SeededRng(seed, (100, stage)),
            )
            train_task(expert, task.train, train_config, rng=SeededRng(seed, (200, stage)))
            pool.extend(compute_prototypes(expert, task.train))
            pool.add_scope(expert.task_id, task.classes)
            experts.append(expert)
            origins.append("trained")
        else:
            add_overflow_task(experts, pool, task.train, task.task_id, merge)
            origins.append("synthesized")
        tests.append((task.task_id, task.test))
        del task  # the stage's training partition is not reachable past this point

        feats = np.concatenate([p.features for _, p in tests])
        msa = np.concatenate([p.msa for _, p in tests])
        labels = np.concatenate([p.labels for _, p in tests])
        true_tasks = np.concatenate([np.full(len(p), tid) for tid, p in tests])
        t0 = time.perf_counter()
        pred, pred_task = predict_batch(feats, msa, experts, pool, inference_config)
        t_eval = time.perf_counter() - t0
        n_eval = labels.shape[0]
        row = []
        off = 0
        for _, p in tests:
            n = len(p)
            row.append(float(np.mean(pred[off : off + n] == p.labels)) if n else float("nan"))
            off += n
        matrix.append(row)
        tia_curve.append(task_identify_accuracy(pred_task, true_tasks))
        cum_curve.append(float(np.mean(pred == labels)))
        if keep_predictions:
            predictions[stage] = (pred, pred_task, labels, true_tasks)

    if not matrix:
        raise ValueError("protocol has no tasks")
    T = len(matrix)
    avg_curve = [avg_accuracy(matrix, t) for t in range(T)]
    af_curve = [None] + [avg_forgetting(matrix, t) for t in range(1, T)]
    config = {
        "train": asdict(train_config),
        "inference": inference_config.snapshot(),
        "adapter_limit": adapter_limit,
        "merge": merge,
        "seed": seed,
    }
    metrics = RunMetrics(
        matrix=matrix,
        avg_curve=avg_curve,
        final_avg=avg_curve[-1],
        last_union=cum_curve[-1],
        last_task=matrix[-1][-1],
        af=af_curve[-1],
        af_curve=af_curve,
        tia_curve=tia_curve,
        cumulative_curve=cum_curve,
        avg_incremental=float(np.mean(avg_curve)),
        seed=seed,
        config=config,
        stage_origins=origins,
        wall_clock_per_sample=t_eval / max(n_eval, 1),
    )
    if timing_samples:
        k = min(timing_samples + WARMUP, feats.shape[0])
        metrics.timing = timing_report(experts, pool, feats[:k], msa[:k], inference_config)
    return RunResult(metrics, memory_report(experts, pool), experts, pool, predictions)


# --------------------------------------------------------------------------
# synthetic protocol presets


def synthetic_tasks(spec, base, increment, seed, shuffle=True):
    ds = generate_synthetic(spec)
    proto = Protocol.build(ds.class_ids, base, increment, seed, shuffle)
    return make_splits(ds, proto)


def aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0)) if arr.size > 1 else 0.0}


def linear_fit_r2(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def easy_spec(seed):
    """Well-separated regime: 5 tasks x 4 classes, rho/sigma = 10."""
    return SyntheticSpec(n_classes=20, dim=32, samples_per_class=50, rho=10.0, sigma=1.0, seed=seed,
                         name="easy")


def confusable_spec(seed, drift=1.0):
    """Overlapping regime: rho/sigma = 1.5 with a mild per-task domain offset."""
    return SyntheticSpec(n_classes=20, dim=32, samples_per_class=200, rho=1.5, sigma=1.0,
                         task_drift=drift, drift_block=4, seed=seed, name="confusable")


PRESETS = {"easy": easy_spec, "confusable": confusable_spec}


def preset_tasks(name, seed):
    spec = PRESETS[name](seed)
    # drift blocks are whole tasks, so class order stays unshuffled when drift is on
    return synthetic_tasks(spec, 0, 4, seed, shuffle=spec.task_drift == 0)
