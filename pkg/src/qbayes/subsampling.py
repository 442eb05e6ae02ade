"""Subsampled likelihood estimators and energy-conserving transitions.

The difference estimator replaces the full-data log-likelihood by a
second-order Taylor surrogate (the control variates, summed once over
the whole dataset) plus a subsample correction:

    l_hat = sum_k q_k(theta) + (N/m) * sum_j (l_{u_j} - q_{u_j}),

with the estimator's own variance estimated from the spread of the
differences.  The bias-corrected likelihood estimate is
exp(l_hat - sigma_hat^2 / 2).

Subsampling indices are drawn uniformly with replacement; a block
pseudo-marginal Metropolis step refreshes one contiguous block at a time
(cyclic schedule) so consecutive likelihood estimates stay correlated
and the chain cannot jam on an over-estimated index set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import ControlVariateSingularityError
from .kernels import HmcConfig, MassState, hmc_move
from .models import Dataset, ModelSpec


@dataclass
class SubsampleState:
    """Index vector (with replacement) plus its block structure."""

    indices: np.ndarray
    n_blocks: int = 1
    next_block: int = 0

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.n_blocks < 1 or self.n_blocks > len(self.indices):
            raise ValueError("need 1 <= blocks <= m")

    @property
    def m(self) -> int:
        return len(self.indices)

    def block_slices(self):
        """Contiguous blocks whose sizes differ by at most one."""
        bounds = np.linspace(0, self.m, self.n_blocks + 1).astype(int)
        return [slice(bounds[b], bounds[b + 1]) for b in range(self.n_blocks)]

    @classmethod
    def draw(cls, n_data: int, m: int, n_blocks: int, rng) -> "SubsampleState":
        return cls(rng.integers(0, n_data, size=m), n_blocks)


@dataclass
class ControlVariates:
    """Per-datum Taylor coefficients of the log-likelihood at theta_star.

    ``values``, ``grads`` and ``hessians`` hold the per-datum expansion
    coefficients; the precomputed full-data sums make sum_k q_k(theta) an
    O(dim^2) evaluation.
    """

    theta_star: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    hessians: np.ndarray
    sum_value: float = field(init=False)
    sum_grad: np.ndarray = field(init=False)
    sum_hess: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sum_value = float(self.values.sum())
        self.sum_grad = self.grads.sum(axis=0)
        self.sum_hess = self.hessians.sum(axis=0)

    @property
    def n(self) -> int:
        return len(self.values)

    def q_sum(self, thetas) -> np.ndarray:
        """sum_k q_k(theta) for each theta row."""
        delta = np.atleast_2d(thetas) - self.theta_star
        quad = np.einsum("ij,jk,ik->i", delta, self.sum_hess, delta)
        return self.sum_value + delta @ self.sum_grad + 0.5 * quad

    def grad_q_sum(self, thetas) -> np.ndarray:
        delta = np.atleast_2d(thetas) - self.theta_star
        return self.sum_grad + delta @ self.sum_hess.T

    def q_terms(self, thetas, idx) -> np.ndarray:
        """q_k(theta) for row-specific index sets: (M, m)."""
        delta = np.atleast_2d(thetas) - self.theta_star
        lin = np.einsum("imk,ik->im", self.grads[idx], delta)
        quad = np.einsum("ik,imkl,il->im", delta, self.hessians[idx], delta)
        return self.values[idx] + lin + 0.5 * quad

    def grad_q_terms(self, thetas, idx) -> np.ndarray:
        """Per-datum gradient of q_k for row-specific sets: (M, m, dim)."""
        delta = np.atleast_2d(thetas) - self.theta_star
        return self.grads[idx] + np.einsum("imkl,il->imk", self.hessians[idx], delta)


def build_control_variates(spec: ModelSpec, dataset: Dataset, theta_star) -> ControlVariates:
    """Second-order expansion of every datum's log-likelihood at theta_star.

    The reference point must be clear of likelihood zeros (warm up
    first); otherwise the surrogate is unusable and this raises.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64).reshape(-1)
    c1, c2 = dataset.controls_arrays(spec)
    values = _backend.loglike_terms(
        spec.code, spec.hyper_arr, theta_star, c1, c2, dataset.outcomes
    )
    if np.any(values <= _backend.LOG_FLOOR):
        raise ControlVariateSingularityError(
            "some datum has zero likelihood at theta_star; warm up first"
        )
    grads = _backend.grad_loglike_terms(
        spec.code, spec.hyper_arr, theta_star, c1, c2, dataset.outcomes
    )
    hessians = _backend.hess_loglike_terms(
        spec.code, spec.hyper_arr, theta_star, c1, c2, dataset.outcomes
    )
    if not (np.isfinite(grads).all() and np.isfinite(hessians).all()):
        raise ControlVariateSingularityError("non-finite expansion at theta_star")
    return ControlVariates(theta_star, values, grads, hessians)


def _is_exact_cover(indices: np.ndarray, n: int) -> bool:
    return len(indices) == n and np.array_equal(np.sort(indices), np.arange(n))


def difference_log_estimator_batch(spec, dataset, cv: ControlVariates, idx, thetas):
    """Vectorized (l_hat, sigma_hat^2) for rows of thetas with idx (M, m)."""
    thetas = np.atleast_2d(thetas)
    n = len(dataset)
    m = idx.shape[1]
    c1, c2 = dataset.controls_arrays(spec)
    p1 = _backend.prob_one(spec.code, spec.hyper_arr, thetas[:, None, :], c1[idx], c2[idx])
    outc = dataset.outcomes[idx]
    p = np.where(outc == 1, p1, 1.0 - p1)
    with np.errstate(divide="ignore"):
        ell_terms = np.where(p > 0.0, np.log(np.where(p > 0, p, 1.0)), _backend.LOG_FLOOR)
    q_terms = cv.q_terms(thetas, idx)
    diffs = ell_terms - q_terms
    l_hat = cv.q_sum(thetas) + (n / m) * diffs.sum(axis=1)
    var = diffs.var(axis=1, ddof=1) if m > 1 else np.zeros(thetas.shape[0])
    sigma2 = (n * n / m) * var
    if m == n:
        exact = np.array([_is_exact_cover(idx[i], n) for i in range(idx.shape[0])])
        sigma2 = np.where(exact, 0.0, sigma2)
    return l_hat, sigma2


def difference_log_estimator(spec, dataset, cv: ControlVariates,
                             s: SubsampleState, theta):
    """(l_hat, sigma_hat^2) at one parameter point for one index state.

    An exact-cover subsample (m = N, every index once) reproduces the
    full sum with zero estimator error, so its variance estimate is
    identically zero.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(1, -1)
    l_hat, sigma2 = difference_log_estimator_batch(
        spec, dataset, cv, s.indices[None, :], theta
    )
    return float(l_hat[0]), float(sigma2[0])


def corrected_likelihood_estimator(l_hat: float, sigma2: float) -> float:
    """Bias-corrected likelihood estimate exp(l_hat - sigma_hat^2 / 2)."""
    return float(np.exp(corrected_log_likelihood(l_hat, sigma2)))


def corrected_log_likelihood(l_hat, sigma2):
    """log of the corrected estimator; safe for vectorized use."""
    l_hat = np.asarray(l_hat, dtype=np.float64)
    out = l_hat - 0.5 * np.asarray(sigma2, dtype=np.float64)
    return np.where(l_hat <= _backend.LOG_FLOOR, -np.inf, out)


class EstimatorContext:
    """Bundles everything needed to score (theta, u) pairs."""

    def __init__(self, spec, dataset, cv: ControlVariates, power: float = 1.0):
        self.spec = spec
        self.dataset = dataset
        self.cv = cv
        self.power = power

    def log_estimate(self, theta, indices) -> float:
        l_hat, s2 = difference_log_estimator_batch(
            self.spec, self.dataset, self.cv, np.asarray(indices)[None, :],
            np.asarray(theta).reshape(1, -1),
        )
        return float(corrected_log_likelihood(l_hat, s2)[0])


def block_pm_index_step(s: SubsampleState, theta, ctx: EstimatorContext, rng,
                        log_l_cur: float = None):
    """Refresh one block of subsampling indices at fixed theta.

    The block under the cyclic schedule is overwritten with uniform
    i.i.d. indices and the move accepted with the ratio of corrected
    likelihood estimates.  Returns (state, accepted, log likelihood of
    the retained state).
    """
    n = len(ctx.dataset)
    if log_l_cur is None:
        log_l_cur = ctx.log_estimate(theta, s.indices)
    sl = s.block_slices()[s.next_block % s.n_blocks]
    prop = s.indices.copy()
    prop[sl] = rng.integers(0, n, size=sl.stop - sl.start)
    log_l_prop = ctx.log_estimate(theta, prop)
    accept = np.log(rng.random()) < ctx.power * (log_l_prop - log_l_cur)
    nxt = (s.next_block + 1) % s.n_blocks
    if accept:
        return SubsampleState(prop, s.n_blocks, nxt), True, log_l_prop
    return SubsampleState(s.indices, s.n_blocks, nxt), False, log_l_cur


class SubsampledDataView:
    """Data view targeting the estimated posterior at fixed indices.

    Potential is -power * log L_hat(theta, u) with a flat prior; the
    gradient differentiates both the difference estimator and its
    variance term.
    """

    def __init__(self, ctx: EstimatorContext, indices: np.ndarray):
        self.ctx = ctx
        self.indices = np.atleast_2d(np.ascontiguousarray(indices, dtype=np.int64))
        self.lower = ctx.spec.lower
        self.upper = ctx.spec.upper

    def _idx_for(self, thetas):
        mrows = np.atleast_2d(thetas).shape[0]
        if self.indices.shape[0] == mrows:
            return self.indices
        if self.indices.shape[0] == 1:
            return np.broadcast_to(self.indices, (mrows, self.indices.shape[1]))
        raise ValueError("index rows do not match theta rows")

    def logpost(self, thetas):
        idx = self._idx_for(thetas)
        l_hat, s2 = difference_log_estimator_batch(
            self.ctx.spec, self.ctx.dataset, self.ctx.cv, idx, thetas
        )
        return self.ctx.power * corrected_log_likelihood(l_hat, s2)

    def grad_logpost(self, thetas):
        thetas = np.atleast_2d(thetas)
        idx = self._idx_for(thetas)
        spec, dataset, cv = self.ctx.spec, self.ctx.dataset, self.ctx.cv
        n = len(dataset)
        m = idx.shape[1]
        c1, c2 = dataset.controls_arrays(spec)
        g_ell = _backend.grad_loglike_terms_indexed(
            spec.code, spec.hyper_arr, thetas, c1, c2, dataset.outcomes, idx
        )
        g_q = cv.grad_q_terms(thetas, idx)
        g_diffs = g_ell - g_q
        grad_lhat = cv.grad_q_sum(thetas) + (n / m) * g_diffs.sum(axis=1)
        if m > 1:
            p1 = _backend.prob_one(
                spec.code, spec.hyper_arr, thetas[:, None, :], c1[idx], c2[idx]
            )
            outc = dataset.outcomes[idx]
            p = np.where(outc == 1, p1, 1.0 - p1)
            with np.errstate(divide="ignore"):
                ell_terms = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), _backend.LOG_FLOOR)
            diffs = ell_terms - cv.q_terms(thetas, idx)
            centered = diffs - diffs.mean(axis=1, keepdims=True)
            g_centered = g_diffs - g_diffs.mean(axis=1, keepdims=True)
            grad_var = 2.0 / (m - 1) * np.einsum("im,imk->ik", centered, g_centered)
            grad_s2 = (n * n / m) * grad_var
            if m == n:
                # exact covers have identically zero estimator error
                exact = np.array([_is_exact_cover(idx[i], n) for i in range(idx.shape[0])])
                grad_s2[exact] = 0.0
        else:
            grad_s2 = np.zeros_like(grad_lhat)
        return self.ctx.power * (grad_lhat - 0.5 * grad_s2)


def ecs_gibbs_step(theta, s: SubsampleState, ctx: EstimatorContext,
                   hmc_cfg: HmcConfig, rng, mass_state: MassState = None):
    """Composite Gibbs transition: refresh indices, then HMC at fixed u.

    The index update is a block pseudo-marginal Metropolis step at fixed
    theta; the position update is one HMC step targeting the estimated
    potential at the retained indices.  Returns (theta', state',
    info dict with both acceptance flags).
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    s, idx_accepted, _ = block_pm_index_step(s, theta, ctx, rng)
    view = SubsampledDataView(ctx, s.indices)
    lp = view.logpost(theta[None, :])
    r = hmc_move(theta[None, :], lp, view, hmc_cfg, rng, mass_state)
    info = {
        "index_accepted": idx_accepted,
        "hmc_accepted": bool(r.accepted[0]),
        "hmc_accept_prob": float(r.accept_prob[0]),
    }
    return r.theta[0], s, info
