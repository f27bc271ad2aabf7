"""Expert filtering, confidence/SCS weighting and fused nearest-prototype prediction."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

EPS = 1e-12
ABLATIONS = {
    1: (False, False, False),
    2: (True, False, False),
    3: (True, True, False),
    4: (True, False, True),
    5: (True, True, True),
}


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    """Which stages of the decision rule are active.

    ``gamma=None`` is the adaptive setting (gamma equals the expert's base
    term). ``scs_only`` picks the weight used when SCS is on and confidence is
    off: ``"one_plus"`` gives 1 + s, ``"plain"`` gives s.
    """

    filtering: bool = True
    confidence_reweight: bool = True
    scs_reweight: bool = True
    gamma: float | None = None
    scs_only: str = "one_plus"

    def __post_init__(self):
        if self.scs_only not in ("one_plus", "plain"):
            raise ValueError("scs_only must be 'one_plus' or 'plain'")
        if self.gamma is not None and not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")

    @classmethod
    def ablation(cls, tag, gamma=None):
        if tag not in ABLATIONS:
            raise ValueError(f"ablation tag must be one of {sorted(ABLATIONS)}")
        f, c, s = ABLATIONS[tag]
        return cls(f, c, s, gamma)

    @property
    def tag(self):
        flags = (self.filtering, self.confidence_reweight, self.scs_reweight)
        for t, v in ABLATIONS.items():
            if v == flags and (t != 5 or self.gamma is None):
                return t
        return None

    @property
    def gamma_mode(self):
        return "adaptive" if self.gamma is None else "fixed"

    def snapshot(self):
        d = asdict(self)
        d["tag"] = self.tag
        d["gamma_mode"] = self.gamma_mode
        return d


@dataclass
class ExpertVerdict:
    expert_id: int
    feature: np.ndarray
    sims: np.ndarray
    predicted_class: int
    z1st: float
    z2nd: float
    scs: float
    reliable: bool


@dataclass
class PredictionResult:
    predicted_class: int
    predicted_task: int
    reliable_experts: list
    fused_feature: np.ndarray
    weights: dict
    verdicts: list = field(default_factory=list)


def scs(z1st, z2nd):
    """Normalised top-2 margin; zero when the top logit is not positive."""
    z1 = np.asarray(z1st, dtype=np.float64)
    z2 = np.asarray(z2nd, dtype=np.float64)
    out = np.where(z1 > 0, (z1 - z2) / np.maximum(z1, EPS), 0.0)
    return float(out) if out.ndim == 0 else out


def expert_weight(z1st, s, config):
    z1 = np.asarray(z1st, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not config.scs_reweight:
        s = np.zeros_like(s)
    if config.confidence_reweight:
        base = z1
    elif config.scs_reweight and config.scs_only == "plain":
        base = np.zeros_like(z1)
    else:
        base = np.ones_like(z1)
    if config.gamma is None:
        gamma = base if config.confidence_reweight else np.ones_like(z1)
    else:
        gamma = config.gamma
    w = np.maximum(base + gamma * s, 0.0)
    return float(w) if w.ndim == 0 else w


def uniform_weights(config):
    return not (config.confidence_reweight or config.scs_reweight)


def fuse(features, weights):
    """Weighted sum of expert features, accumulated in list order."""
    if len(features) != len(weights):
        raise InferenceError("features and weights differ in length")
    if not features:
        raise InferenceError("nothing to fuse")
    w = np.asarray(weights, dtype=np.float64)
    if not np.any(w != 0):
        w = np.ones_like(w)
    out = np.zeros_like(np.asarray(features[0], dtype=np.float64))
    for f, wi in zip(features, w):
        out = out + wi * np.asarray(f, dtype=np.float64)
    return out


def _check(experts, pool):
    if not len(pool):
        raise InferenceError("prototype pool is empty")
    if not experts:
        raise InferenceError("no experts")
    for e in experts:
        if not e.trained:
            raise InferenceError(f"expert {e.task_id} is untrained")


def evaluate_experts(experts, pool, h_out, h_msa=None, scorer=None):
    """Per-expert features, cosine logits and top-2 statistics for a batch.

    Returns a dict of arrays stacked on a leading expert axis.
    """
    _check(experts, pool)
    h_out = np.atleast_2d(np.asarray(h_out, dtype=np.float64))
    h_msa = h_out if h_msa is None else np.atleast_2d(np.asarray(h_msa, dtype=np.float64))
    ids, protos, _ = pool.arrays()
    scorer = scorer or kernels.PrototypeMatrix(protos)
    feats, sims, top, z1, z2, reliable = [], [], [], [], [], []
    for e in experts:
        f = e.forward(h_out, h_msa)
        s = scorer.sims(f)
        idx, a, b = kernels.top2(s)
        if s.shape[1] == 1:
            b = np.zeros_like(a)
        feats.append(f)
        sims.append(s)
        top.append(idx)
        z1.append(a)
        z2.append(b)
        reliable.append(pool.scope_mask(e.task_id)[idx])
    z1 = np.array(z1)
    z2 = np.array(z2)
    return {
        "class_ids": ids,
        "features": np.array(feats),
        "sims": np.array(sims),
        "top": np.array(top),
        "z1": z1,
        "z2": z2,
        "scs": scs(z1, z2) if z1.size else z1,
        "reliable": np.array(reliable),
    }


def evaluate_expert(expert, pool, h_out, h_msa=None):
    ev = evaluate_experts([expert], pool, np.atleast_2d(h_out),
                          None if h_msa is None else np.atleast_2d(h_msa))
    return ExpertVerdict(
        expert_id=expert.task_id,
        feature=ev["features"][0, 0],
        sims=ev["sims"][0, 0],
        predicted_class=int(ev["class_ids"][ev["top"][0, 0]]),
        z1st=float(ev["z1"][0, 0]),
        z2nd=float(ev["z2"][0, 0]),
        scs=float(ev["scs"][0, 0]),
        reliable=bool(ev["reliable"][0, 0]),
    )


def combine(ev, config):
    """Fold per-expert evaluations into fused features; returns (F_mix, weights, kept)."""
    reliable = ev["reliable"]
    n_exp, n = reliable.shape
    keep = reliable.copy() if config.filtering else np.ones_like(reliable)
    empty = ~keep.any(axis=0)
    keep[:, empty] = True
    if uniform_weights(config):
        w = np.ones((n_exp, n))
    else:
        w = expert_weight(ev["z1"], ev["scs"], config)
    w = np.where(keep, w, 0.0)
    dead = ~np.any(w != 0, axis=0)
    w[:, dead] = keep[:, dead].astype(np.float64)
    feats = ev["features"]
    mixed = np.zeros(feats.shape[1:])
    for k in range(n_exp):
        mixed += w[k][:, None] * feats[k]
    single = keep.sum(axis=0) == 1
    if np.any(single):
        which = np.argmax(keep, axis=0)
        rows = np.flatnonzero(single)
        mixed[rows] = feats[which[rows], rows]
    return mixed, w, keep


def predict_batch(h_out, h_msa, experts, pool, config, return_details=False):
    """Fused prediction for every row; returns (classes, tasks[, details])."""
    experts = sorted(experts, key=lambda e: e.task_id)
    ids, protos, tasks = pool.arrays()
    scorer = kernels.PrototypeMatrix(protos)
    ev = evaluate_experts(experts, pool, h_out, h_msa, scorer)
    mixed, w, keep = combine(ev, config)
    idx, _, _ = kernels.top2(scorer.sims(mixed))
    classes = ids[idx]
    out_tasks = tasks[idx]
    if not return_details:
        return classes, out_tasks
    ev.update(mixed=mixed, weights=w, keep=keep)
    return classes, out_tasks, ev


def predict(h_out, h_msa, experts, pool, config):
    experts = sorted(experts, key=lambda e: e.task_id)
    h_msa = h_out if h_msa is None else h_msa
    classes, tasks, ev = predict_batch(
        np.atleast_2d(h_out), np.atleast_2d(h_msa), experts, pool, config, return_details=True
    )
    ids = ev["class_ids"]
    verdicts = [
        ExpertVerdict(
            expert_id=e.task_id,
            feature=ev["features"][k, 0],
            sims=ev["sims"][k, 0],
            predicted_class=int(ids[ev["top"][k, 0]]),
            z1st=float(ev["z1"][k, 0]),
            z2nd=float(ev["z2"][k, 0]),
            scs=float(ev["scs"][k, 0]),
            reliable=bool(ev["reliable"][k, 0]),
        )
        for k, e in enumerate(experts)
    ]
    return PredictionResult(
        predicted_class=int(classes[0]),
        predicted_task=int(tasks[0]),
        reliable_experts=[v.expert_id for v in verdicts if v.reliable],
        fused_feature=ev["mixed"][0],
        weights={e.task_id: float(ev["weights"][k, 0]) for k, e in enumerate(experts) if ev["keep"][k, 0]},
        verdicts=verdicts,
    )


class DiagnosticsSink:
    """Append-only JSON-lines record of per-sample verdicts and the fused feature."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def write(self, sample_id, result, label=None):
        rec = {
            "sample": int(sample_id),
            "label": None if label is None else int(label),
            "predicted_class": result.predicted_class,
            "predicted_task": result.predicted_task,
            "reliable": result.reliable_experts,
            "weights": {str(k): v for k, v in result.weights.items()},
            "verdicts": [
                {
                    "expert": v.expert_id,
                    "class": v.predicted_class,
                    "z1st": v.z1st,
                    "z2nd": v.z2nd,
                    "scs": v.scs,
                    "reliable": v.reliable,
                }
                for v in result.verdicts
            ],
            "fused": result.fused_feature.tolist(),
        }
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
