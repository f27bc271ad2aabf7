import numpy as np
import pytest

import oracles
from mote.dataset import Partition
from mote.expert import PAR, SEQ, AdapterExpert
from mote.numerics import SeededRng
from mote.prototypes import (
    MERGED,
    PoolError,
    Prototype,
    PrototypePool,
    add_overflow_task,
    compute_prototypes,
    merge_weights,
    synthesize_overflow_prototypes,
)


def part(feats, labels, msa=None):
    feats = np.asarray(feats, dtype=float)
    msa = feats if msa is None else np.asarray(msa, dtype=float)
    return Partition(feats, msa, np.asarray(labels), np.arange(len(labels)))


def trained(task_id, scope, w_down, w_up, mode=SEQ):
    return AdapterExpert(task_id, scope, w_down, w_up, mode, trained=True)


def test_single_sample_prototype(rng):
    e = trained(0, {3}, rng.normal(size=(4, 2)), rng.normal(size=(2, 4)))
    x = rng.normal(size=(1, 4))
    [p] = compute_prototypes(e, part(x, [3]))
    assert np.array_equal(p.vector, e.forward(x)[0])
    assert p.origin == 0 and p.task_id == 0


def test_two_sample_mean():
    e = trained(0, {1}, np.zeros((3, 1)), np.zeros((1, 3)))
    [p] = compute_prototypes(e, part([[1, 2, 3], [3, 2, 1]], [1, 1]))
    assert p.vector.tolist() == [2.0, 2.0, 2.0]


def test_fifty_sample_mean_matches_two_pass(rng):
    e = trained(0, {0, 1}, rng.normal(size=(6, 2)), rng.normal(size=(2, 6)), PAR)
    x, m = rng.normal(size=(100, 6)), rng.normal(size=(100, 6))
    labels = np.repeat([0, 1], 50)
    protos = compute_prototypes(e, part(x, labels, m))
    for p in protos:
        rows = [
            oracles.adapter(x[i].tolist(), m[i].tolist(), e.w_down.tolist(), e.w_up.tolist(), True)
            for i in np.flatnonzero(labels == p.class_id)
        ]
        np.testing.assert_allclose(p.vector, oracles.two_pass_mean(rows), atol=1e-12)


def test_compute_errors():
    e = AdapterExpert.create(0, {0}, 3, 1)
    with pytest.raises(PoolError):
        compute_prototypes(e, part(np.ones((1, 3)), [0]))
    e.trained = True
    with pytest.raises(PoolError):
        compute_prototypes(e, part(np.ones((1, 3)), [1]))
    e2 = trained(0, {0, 1}, np.zeros((3, 1)), np.zeros((1, 3)))
    with pytest.raises(PoolError):
        compute_prototypes(e2, part(np.ones((1, 3)), [0]))


def test_pool_rejects_duplicates():
    pool = PrototypePool()
    pool.add(Prototype(1, 0, [1.0, 0.0], 0))
    with pytest.raises(PoolError):
        pool.add(Prototype(1, 0, [0.0, 1.0], 0))
    with pytest.raises(PoolError):
        Prototype(2, 0, [0.0, 0.0], 0)


def pool_with(protos, scopes):
    pool = PrototypePool()
    pool.extend(protos)
    for e, cs in scopes.items():
        pool.add_scope(e, cs)
    return pool


def test_single_expert_merge_is_its_mean(rng):
    e = trained(0, {0}, rng.normal(size=(4, 2)), rng.normal(size=(2, 4)))
    pool = pool_with([Prototype(0, 0, [1.0, 0.5, 0.0, 0.0], 0)], {0: {0}})
    x = rng.normal(size=(5, 4))
    [p] = synthesize_overflow_prototypes([e], pool, part(x, [7] * 5), task_id=1)
    np.testing.assert_allclose(p.vector, e.forward(x).mean(axis=0), atol=1e-15)
    assert p.origin == MERGED and p.task_id == 1


def test_equal_similarity_merge_is_average():
    wd, wu = np.array([[1.0], [0.0], [0.0]]), np.array([[0.0, 1.0, 0.0]])
    e1, e2 = trained(0, {0}, wd, wu), trained(1, {1}, wd, wu)
    pool = pool_with([Prototype(0, 0, [1.0, 1.0, 1.0], 0), Prototype(1, 1, [1.0, 1.0, 1.0], 1)],
                     {0: {0}, 1: {1}})
    x = np.array([[1.0, 0.0, 1.0]])
    [p] = synthesize_overflow_prototypes([e1, e2], pool, part(x, [5]), task_id=2)
    np.testing.assert_allclose(p.vector, (e1.forward(x)[0] + e2.forward(x)[0]) / 2)


def test_three_expert_merge_hand_evaluated():
    w_down = [
        [[1.0], [0.0], [0.0], [0.0]],
        [[0.0], [1.0], [0.0], [0.0]],
        [[0.0], [0.0], [-1.0], [1.0]],
    ]
    w_up = [
        [[0.0, 0.0, 1.0, 0.0]],
        [[1.0, 0.0, 0.0, -1.0]],
        [[0.0, 2.0, 0.0, 0.0]],
    ]
    experts = [trained(k, {k}, w_down[k], w_up[k]) for k in range(3)]
    pool_vecs = {0: [1.0, 0.0, 1.0, 0.0], 1: [0.0, 1.0, 0.0, 0.0], 2: [1.0, 1.0, 1.0, 1.0]}
    pool = pool_with([Prototype(c, c, v, c) for c, v in pool_vecs.items()], {c: {c} for c in pool_vecs})
    samples = [[1.0, 2.0, 0.0, 1.0], [0.5, 0.0, 0.5, 2.0]]

    # steps (1)-(4) by hand, scalar arithmetic only
    means = []
    for k in range(3):
        outs = [oracles.adapter(s, s, w_down[k], w_up[k], False) for s in samples]
        means.append([(outs[0][j] + outs[1][j]) / 2 for j in range(4)])
    best = [oracles.cos(means[k], pool_vecs[k]) for k in range(3)]
    pos = [max(b, 0.0) for b in best]
    u = [p / sum(pos) for p in pos]
    expected = [sum(u[k] * means[k][j] for k in range(3)) for j in range(4)]

    [p] = synthesize_overflow_prototypes(experts, pool, part(samples, [9, 9]), task_id=3)
    np.testing.assert_allclose(p.vector, expected, atol=1e-14)
    assert len(set(round(x, 6) for x in u)) > 1


def test_merge_is_convex_and_widens_scopes(rng):
    experts = [trained(k, {k}, rng.normal(size=(5, 2)), rng.normal(size=(2, 5)) * 0.3) for k in range(3)]
    pool = pool_with([Prototype(k, k, rng.normal(size=5), k) for k in range(3)], {k: {k} for k in range(3)})
    x = rng.normal(size=(8, 5))
    labels = [10] * 4 + [11] * 4
    protos = add_overflow_task(experts, pool, part(x, labels), task_id=3)
    assert len(pool) == 5
    for e in experts:
        assert {10, 11} <= pool.scope_of[e.task_id]
    for p in protos:
        cands = np.array([e.forward(x[np.array(labels) == p.class_id]).mean(axis=0) for e in experts])
        assert np.all(p.vector >= cands.min(axis=0) - 1e-12)
        assert np.all(p.vector <= cands.max(axis=0) + 1e-12)


def test_overflow_errors(rng):
    pool = pool_with([Prototype(0, 0, [1.0, 0.0, 0.0], 0)], {0: {0}})
    with pytest.raises(PoolError):
        synthesize_overflow_prototypes([], pool, part(np.ones((1, 3)), [1]), 1)
    e = trained(0, {0}, np.zeros((3, 1)), np.zeros((1, 3)))
    with pytest.raises(PoolError):
        synthesize_overflow_prototypes([e], pool, part(np.ones((1, 3)), [0]), 1)


def test_merge_weight_modes():
    np.testing.assert_allclose(merge_weights([0.5, 0.5, -1.0]), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(merge_weights([-0.1, -0.3]), [0.5, 0.5])
    assert merge_weights([0.2, 0.4], "softmax").sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(merge_weights([0.2, 0.4], "raw"), [0.2, 0.4])
    with pytest.raises(ValueError):
        merge_weights([1.0], "median")


def test_pool_checkpoint_roundtrip(tmp_path, rng):
    pool = pool_with(
        [Prototype(3, 0, rng.normal(size=4), 0), Prototype(1, 1, rng.normal(size=4), 1),
         Prototype(8, 2, rng.normal(size=4), MERGED)],
        {0: {3, 8}, 1: {1, 8}},
    )
    pool.save(tmp_path / "p.motp")
    blob = (tmp_path / "p.motp").read_bytes()
    assert blob[:4] == b"MOTP" and len(blob) == 16 + 3 * (12 + 32)
    back = PrototypePool.load(tmp_path / "p.motp")
    assert sorted(back.prototypes) == [1, 3, 8]
    assert back[8].origin == MERGED
    assert back.scope_of == pool.scope_of
    for c in (1, 3, 8):
        assert np.array_equal(back[c].vector, pool[c].vector)
    assert pool.nbytes(4) == 3 * 4 * 4
    assert PrototypePool().nbytes() == 0
