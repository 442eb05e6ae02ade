"""Compiled extension vs numpy reference: same numbers, both present."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qbayes._backend import _ref

try:
    from qbayes._backend import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled core not built")

KINDS = {
    0: (1, np.array([])),          # precession
    1: (3, np.array([])),          # multi-cosine
    2: (1, np.array([])),          # t1 decay
    3: (1, np.array([])),          # hahn echo
    4: (1, np.array([0.45, 0.5])), # hahn echo with calibrated A, B
    5: (2, np.array([])),          # ramsey decay
    6: (1, np.array([])),          # phase estimation
}


def case(kind, rng, m=50, n=40):
    dim, hyper = KINDS[kind]
    lo = 0.05 if kind not in (2, 3, 4) else 5.0
    hi = 1.0 if kind not in (2, 3, 4) else 100.0
    thetas = rng.uniform(lo, hi, (m, dim))
    c1 = rng.uniform(0.1, 10.0, n) if kind != 6 else rng.integers(1, 9, n).astype(float)
    c2 = rng.uniform(0, 2 * np.pi, n)
    outcomes = rng.integers(0, 2, n)
    return hyper, np.ascontiguousarray(thetas), np.ascontiguousarray(c1), \
        np.ascontiguousarray(c2), np.ascontiguousarray(outcomes)


@needs_core
@pytest.mark.parametrize("kind", sorted(KINDS))
def test_loglike_sum_agrees(kind):
    rng = np.random.default_rng(kind)
    hyper, thetas, c1, c2, outcomes = case(kind, rng)
    a = _ref.loglike_sum(kind, hyper, thetas, c1, c2, outcomes)
    b = _core.loglike_sum(kind, hyper, thetas, c1, c2, outcomes)
    assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_core
@pytest.mark.parametrize("kind", sorted(KINDS))
def test_grad_loglike_sum_agrees(kind):
    rng = np.random.default_rng(100 + kind)
    hyper, thetas, c1, c2, outcomes = case(kind, rng)
    a = _ref.grad_loglike_sum(kind, hyper, thetas, c1, c2, outcomes)
    b = _core.grad_loglike_sum(kind, hyper, thetas, c1, c2, outcomes)
    assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@needs_core
@pytest.mark.parametrize("kind", sorted(KINDS))
def test_indexed_variants_agree(kind):
    rng = np.random.default_rng(200 + kind)
    hyper, thetas, c1, c2, outcomes = case(kind, rng)
    idx = rng.integers(0, len(c1), size=(thetas.shape[0], 12))
    a = _ref.loglike_sum_indexed(kind, hyper, thetas, c1, c2, outcomes, idx)
    b = _core.loglike_sum_indexed(kind, hyper, thetas, c1, c2, outcomes, idx)
    assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    ga = _ref.grad_loglike_terms_indexed(kind, hyper, thetas, c1, c2, outcomes, idx)
    gb = _core.grad_loglike_terms_indexed(kind, hyper, thetas, c1, c2, outcomes, idx)
    assert_allclose(ga, gb, rtol=1e-10, atol=1e-10)


@needs_core
def test_clamped_values_agree(rng):
    # zero-probability outcomes hit the same floor on both paths
    thetas = np.array([[0.5]])
    c1 = np.array([np.pi])
    c2 = np.array([0.0])
    outcomes = np.array([0])
    a = _ref.loglike_sum(0, np.array([]), thetas, c1, c2, outcomes)
    b = _core.loglike_sum(0, np.array([]), thetas, c1, c2, outcomes)
    assert a[0] == b[0] == _ref.LOG_FLOOR


def test_env_var_forces_ref(tmp_path):
    import subprocess
    import sys

    code = ("import qbayes; print(qbayes.BACKEND_NAME)")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"QBAYES_BACKEND": "ref", "PATH": "/usr/bin:/bin:/usr/local/bin"},
                         capture_output=True, text=True)
    assert out.stdout.strip() == "ref"
