"""Likelihood-kernel backend selection.

The compiled extension is preferred when importable; the numpy reference
implementation is the fallback.  Set ``QBAYES_BACKEND=ref`` to force the
fallback (used by the benchmark and by backend-equivalence tests).

The hot functions (summed log-likelihoods and gradients over particles)
dispatch to the active backend; everything else (pointwise probabilities,
per-datum terms, Hessians) always runs the numpy implementation since it
is evaluated once per stage, not per particle.
"""

import os

import numpy as np

from . import _ref
from ._ref import (
    KIND_HAHN_AB,
    KIND_HAHN_T2,
    KIND_IPE,
    KIND_MULTI_COS,
    KIND_PRECESSION,
    KIND_RAMSEY,
    KIND_T1,
    LOG_FLOOR,
    d2prob_one,
    dprob_one,
    grad_loglike_terms,
    hess_loglike_terms,
    loglike_terms,
    prob_one,
)

if os.environ.get("QBAYES_BACKEND", "").lower() == "ref":
    _core = None
else:
    try:
        from . import _core
    except ImportError:
        _core = None

BACKEND_NAME = "compiled" if _core is not None else "ref"
_impl = _core if _core is not None else _ref


def _as_c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


def _norm(hyper, thetas, c1, c2, outcomes):
    return (
        _as_c(hyper if hyper is not None else ()),
        np.ascontiguousarray(np.atleast_2d(thetas), dtype=np.float64),
        _as_c(c1),
        _as_c(c2),
        _as_c(outcomes, np.int64),
    )


def loglike_sum(kind, hyper, thetas, c1, c2, outcomes):
    """Clamped log-likelihood summed over all data, per theta row: (M,)."""
    return _impl.loglike_sum(kind, *_norm(hyper, thetas, c1, c2, outcomes))


def grad_loglike_sum(kind, hyper, thetas, c1, c2, outcomes):
    """Gradient of the summed log-likelihood, per theta row: (M, dim)."""
    return _impl.grad_loglike_sum(kind, *_norm(hyper, thetas, c1, c2, outcomes))


def loglike_sum_indexed(kind, hyper, thetas, c1, c2, outcomes, idx):
    """Row-specific subset log-likelihood sums: (M,)."""
    idx = _as_c(idx, np.int64)
    return _impl.loglike_sum_indexed(kind, *_norm(hyper, thetas, c1, c2, outcomes), idx)


def grad_loglike_terms_indexed(kind, hyper, thetas, c1, c2, outcomes, idx):
    """Per-datum gradients over row-specific subsets: (M, m, dim)."""
    idx = _as_c(idx, np.int64)
    return _impl.grad_loglike_terms_indexed(
        kind, *_norm(hyper, thetas, c1, c2, outcomes), idx
    )
