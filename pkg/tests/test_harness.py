import numpy as np
import pytest

from mote.expert import TrainConfig
from mote.harness import (
    MetricError,
    avg_accuracy,
    avg_forgetting,
    linear_fit_r2,
    memory_report,
    preset_tasks,
    run_protocol,
    task_identify_accuracy,
)
from mote.expert import AdapterExpert
from mote.inference import InferenceConfig
from mote.prototypes import Prototype, PrototypePool

FAST = TrainConfig(epochs=2, rank=8)


def lower_triangular(rng, T):
    return [[float(rng.uniform()) for _ in range(i + 1)] for i in range(T)]


def brute_af(a, T):
    # literal transcription: f_{j,k} = max_{i<k} (a_ij - a_kj), averaged over j < T
    k = T - 1
    fs = []
    for j in range(k):
        fs.append(max(a[i][j] - a[k][j] for i in range(j, k)))
    return sum(fs) / len(fs)


def test_avg_examples(rng):
    assert avg_accuracy([[0.9], [0.9, 0.8]], 1) == pytest.approx(0.85, abs=1e-15)
    assert avg_accuracy([[0.3], [0.3, 0.3], [0.3, 0.3, 0.3]], 2) == pytest.approx(0.3, abs=1e-15)
    m = lower_triangular(rng, 7)
    assert abs(avg_accuracy(m, 6) - sum(m[6]) / 7) <= 1e-15
    with pytest.raises(MetricError):
        avg_accuracy([[0.5], [0.5]], 1)


def test_af_examples(rng):
    assert avg_forgetting([[0.95], [0.90, 0.7]], 1) == pytest.approx(0.05, abs=1e-15)
    assert avg_forgetting([[0.5], [0.6, 0.5], [0.7, 0.6, 0.5]], 2) == pytest.approx(-0.1)
    assert avg_forgetting([[0.5], [0.5, 0.5], [0.5, 0.5, 0.5]], 2) == 0.0
    m = lower_triangular(rng, 4)
    assert avg_forgetting(m, 3) == brute_af(m, 4)
    with pytest.raises(MetricError):
        avg_forgetting([[0.5]], 0)


def test_tia():
    assert task_identify_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert task_identify_accuracy([0] * 7 + [1] * 3, [0] * 10) == 0.7
    with pytest.raises(MetricError):
        task_identify_accuracy([], [])


def test_memory_report_arithmetic():
    experts = [AdapterExpert.create(i, {i}, 768, 16) for i in range(50)]
    pool = PrototypePool()
    assert memory_report(experts, pool).adapter_bytes == 4_915_200
    assert memory_report(experts, pool).prototype_bytes == 0
    for c in range(100):
        pool.add(Prototype(c, c // 10, np.ones(768), c // 10))
    rep = memory_report(experts[:10], pool)
    assert (rep.n_prototypes, rep.counterfactual_prototypes) == (100, 1000)
    assert rep.prototype_ratio == pytest.approx(0.1)
    assert rep.prototype_bytes == 100 * 768 * 4


def test_linear_fit():
    slope, icpt, r2 = linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9])
    assert slope == pytest.approx(2) and icpt == pytest.approx(1) and r2 == pytest.approx(1)


def test_single_task_run():
    tasks = preset_tasks("easy", 1991)[:1]
    m = run_protocol(tasks, FAST, InferenceConfig(), seed=1991).metrics
    assert len(m.matrix) == 1 and len(m.matrix[0]) == 1
    assert m.final_avg == m.last_union == m.matrix[0][0]
    assert m.af is None


def test_unbound_limit_is_identical():
    tasks = preset_tasks("easy", 1992)
    a = run_protocol(tasks, FAST, InferenceConfig(), seed=1992)
    b = run_protocol(tasks, FAST, InferenceConfig(), adapter_limit=5, seed=1992)
    c = run_protocol(tasks, FAST, InferenceConfig(), adapter_limit=50, seed=1992)
    assert a.metrics.as_dict(False)["matrix"] == b.metrics.as_dict(False)["matrix"]
    assert a.pool.to_bytes() == b.pool.to_bytes() == c.pool.to_bytes()


def test_limited_run_synthesizes_and_keeps_counts():
    tasks = preset_tasks("easy", 1993)
    res = run_protocol(tasks, FAST, InferenceConfig(), adapter_limit=2, seed=1993)
    assert res.metrics.stage_origins == ["trained"] * 2 + ["synthesized"] * 3
    assert len(res.experts) == 2 and len(res.pool) == 20
    assert sum(p.origin == -1 for p in res.pool.prototypes.values()) == 12


def test_matrix_shape_and_pool_growth():
    tasks = preset_tasks("easy", 1994)
    res = run_protocol(tasks, FAST, InferenceConfig(), seed=1994)
    m = res.metrics
    assert [len(r) for r in m.matrix] == [1, 2, 3, 4, 5]
    assert all(0 <= v <= 1 for r in m.matrix for v in r)
    assert len(res.pool) == 20 and res.memory.n_experts == 5
    assert all(t >= a - 1e-12 for t, a in zip(m.tia_curve, m.cumulative_curve))
    assert m.final_avg == m.avg_curve[-1]


def test_diagonal_reproduced_by_prefix_run():
    tasks = preset_tasks("easy", 1995)
    full = run_protocol(tasks, FAST, InferenceConfig(), seed=1995).metrics
    for j in (0, 2):
        prefix = run_protocol(tasks[: j + 1], FAST, InferenceConfig(), seed=1995).metrics
        assert prefix.matrix[j][j] == full.matrix[j][j]


def test_csv_rows():
    tasks = preset_tasks("easy", 1991)[:2]
    m = run_protocol(tasks, FAST, InferenceConfig(), seed=1991).metrics
    rows = m.csv_rows()
    assert [r["stage"] for r in rows] == [1, 2]
    assert rows[0]["af"] == "" and rows[1]["af"] == m.af


def test_invalid_limit():
    with pytest.raises(ValueError):
        run_protocol([], FAST, InferenceConfig(), adapter_limit=0)


def test_easy_regime_has_one_reliable_expert():
    from mote.inference import evaluate_experts

    res = run_protocol(preset_tasks("easy", 1991), TrainConfig(), InferenceConfig(), seed=1991)
    tasks = preset_tasks("easy", 1991)
    h = np.concatenate([t.test.features for t in tasks])
    m = np.concatenate([t.test.msa for t in tasks])
    ev = evaluate_experts(res.experts, res.pool, h, m)
    assert np.mean(ev["reliable"].sum(axis=0) == 1) >= 0.99
    assert res.metrics.tia >= 0.99


def test_ablation_timings_comparable():
    from mote.harness import timing_report
    from mote.numerics import SeededRng

    tasks = preset_tasks("easy", 1992)
    res = run_protocol(tasks, FAST, InferenceConfig(), seed=1992)
    h = SeededRng(3).normal(size=(130, 32))
    t1 = timing_report(res.experts, res.pool, h, h, InferenceConfig.ablation(1))["median"]
    t5 = timing_report(res.experts, res.pool, h, h, InferenceConfig.ablation(5))["median"]
    assert 0.5 <= t5 / t1 <= 2.0


def test_timing_needs_enough_samples():
    from mote.harness import timing_report

    res = run_protocol(preset_tasks("easy", 1993)[:1], FAST, InferenceConfig(), seed=1993)
    h = np.zeros((50, 32)) + 1.0
    with pytest.raises(MetricError):
        timing_report(res.experts, res.pool, h, h, InferenceConfig())
