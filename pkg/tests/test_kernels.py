import numpy as np
import pytest

from rfv import _pykernels as py
from rfv import kernels

ck = pytest.importorskip("rfv._ckernels")


def test_backend_selected():
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("seed", range(20))
def test_rle_equivalent(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 500))
    flat = (rng.random(n) < rng.random()).astype(np.uint8)
    a, b = py.rle_encode(flat), ck.rle_encode(flat)
    assert np.array_equal(a, b)
    assert np.array_equal(py.rle_decode(a, n), ck.rle_decode(a, n))
    assert np.array_equal(ck.rle_decode(a, n), flat)


@pytest.mark.parametrize("seed", range(20))
def test_components_equivalent(seed):
    rng = np.random.default_rng(100 + seed)
    h, w = rng.integers(1, 40, 2)
    bm = (rng.random((h, w)) < rng.random()).astype(np.uint8)
    la, na = py.label_components(bm)
    lb, nb = ck.label_components(bm)
    assert na == nb and np.array_equal(la, lb)


@pytest.mark.parametrize("prune", [True, False])
def test_mips_scan_equivalent(prune):
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(1, 800))
        mat = rng.normal(size=(n, 8)) * rng.uniform(0.1, 5, (n, 1))
        norms = np.linalg.norm(mat, axis=1)
        order = np.argsort(-norms, kind="stable")
        mat, norms = np.ascontiguousarray(mat[order]), np.ascontiguousarray(norms[order])
        rank = np.ascontiguousarray(rng.permutation(n).astype(np.int64))
        q = rng.normal(size=8)
        k = int(rng.integers(1, 10))
        ia, sa, _ = py.mips_scan(mat, norms, rank, q, float(np.linalg.norm(q)), k, prune)
        ib, sb, _ = ck.mips_scan(mat, norms, rank, q, float(np.linalg.norm(q)), k, prune)
        assert np.array_equal(np.asarray(ia), np.asarray(ib))
        assert np.allclose(sa, sb, rtol=1e-12)
