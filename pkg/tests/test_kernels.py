import numpy as np
import pytest

from mote import _kernels_py, kernels

pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


@pytest.fixture
def compiled():
    from mote import _kernels

    return _kernels


@pytest.mark.parametrize("parallel", [False, True])
def test_adapter_forward_agrees(compiled, rng, parallel):
    h, m = rng.normal(size=(30, 12)), rng.normal(size=(30, 12))
    wd, wu = rng.normal(size=(12, 3)), rng.normal(size=(3, 12))
    np.testing.assert_allclose(
        compiled.adapter_forward(h, m, wd, wu, parallel),
        _kernels_py.adapter_forward(h, m, wd, wu, parallel),
        rtol=1e-12, atol=1e-12,
    )


def test_cosine_sims_agree(compiled, rng):
    f, p = rng.normal(size=(40, 9)), rng.normal(size=(7, 9))
    np.testing.assert_allclose(compiled.cosine_sims(f, p), _kernels_py.cosine_sims(f, p), atol=1e-14)


def test_top2_agree_and_tie_rule(compiled, rng):
    s = rng.normal(size=(50, 6))
    s[0] = [0.5, 0.9, 0.9, 0.1, 0.0, 0.2]
    for impl in (compiled, _kernels_py):
        idx, z1, z2 = impl.top2(s)
        assert idx[0] == 1 and z1[0] == 0.9 and z2[0] == 0.9
        np.testing.assert_array_equal(idx, np.argmax(s, axis=1))
        np.testing.assert_array_equal(z2, np.sort(s, axis=1)[:, -2])


def test_compiled_rows_are_batch_independent(compiled, rng):
    h, m = rng.normal(size=(25, 16)), rng.normal(size=(25, 16))
    wd, wu = rng.normal(size=(16, 4)), rng.normal(size=(4, 16))
    p = rng.normal(size=(11, 16))
    full = compiled.cosine_sims(compiled.adapter_forward(h, m, wd, wu, True), p)
    for i in range(25):
        one = compiled.cosine_sims(compiled.adapter_forward(h[i : i + 1], m[i : i + 1], wd, wu, True), p)
        assert np.array_equal(one[0], full[i])


def test_use_switches_backend():
    prev = kernels.BACKEND
    try:
        kernels.use("python")
        assert kernels.BACKEND == "python"
        kernels.use("compiled")
        assert kernels.BACKEND == "compiled"
        with pytest.raises(ValueError):
            kernels.use("fortran")
    finally:
        kernels.use(prev)


def test_prepared_prototypes_match_direct(backend, rng):
    f, p = rng.normal(size=(9, 13)), rng.normal(size=(6, 13))
    scorer = kernels.PrototypeMatrix(p)
    full = kernels.cosine_sims(f, p)
    # BLAS may round differently per layout, so only the compiled path is exact
    same = np.array_equal if backend == "compiled" else (lambda a, b: np.allclose(a, b, rtol=0, atol=1e-14))
    assert same(scorer.sims(f), full)
    # row counts around the tile width
    for n in (1, 3, 4, 5, 8):
        assert same(scorer.sims(f[:n]), full[:n])
