"""Particle-refresh and Markov transition kernels.

All kernels come in two layers: a batched implementation operating on
(M, dim) position arrays (what the SMC drivers call), and thin
single-state wrappers matching one-particle semantics.  Both layers act
on a *data view*: any object exposing

- ``logpost(thetas) -> (M,)``: log posterior (possibly tempered or
  estimated from a subsample),
- ``grad_logpost(thetas) -> (M, dim)``: its gradient,
- ``lower`` / ``upper``: the domain box.

Proposals outside the box are rejected (random walk) or reflected
(Hamiltonian trajectories, mirroring the position and negating the
crossed momentum component).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend, ensemble as ens
from .models import Dataset, ModelSpec

COV_REG = 1e-12
DIVERGENCE_DH = 1e3


def robust_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a tiny ridge for collapsed clouds."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    dim = cov.shape[0]
    try:
        return np.linalg.cholesky(cov + COV_REG * np.eye(dim))
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        w = np.clip(w, COV_REG, None)
        return np.linalg.cholesky((v * w) @ v.T)


class FullDataView:
    """Tempered full-data posterior with a flat prior on the domain box."""

    def __init__(self, spec: ModelSpec, dataset: Dataset, power: float = 1.0):
        self.spec = spec
        self.dataset = dataset
        self.power = power
        self.lower = spec.lower
        self.upper = spec.upper
        self._c1, self._c2 = dataset.controls_arrays(spec)

    def logpost(self, thetas):
        ll = _backend.loglike_sum(
            self.spec.code, self.spec.hyper_arr, thetas,
            self._c1, self._c2, self.dataset.outcomes,
        )
        return self.power * ll

    def grad_logpost(self, thetas):
        g = _backend.grad_loglike_sum(
            self.spec.code, self.spec.hyper_arr, thetas,
            self._c1, self._c2, self.dataset.outcomes,
        )
        return self.power * g


# ---------------------------------------------------------------------------
# Liu-West


@dataclass
class LiuWestConfig:
    """Shrinkage parameter of the Liu-West filter; a=1 is a pure bootstrap."""

    a: float = 0.98

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError("Liu-West parameter a must lie in [0, 1]")


def liu_west_resample(e: ens.WeightedEnsemble, cfg: LiuWestConfig, rng,
                      max_redraws: int = 100) -> ens.WeightedEnsemble:
    """Bootstrap + kernel shrinkage resampler.

    New positions are N(a*theta_s + (1-a)*mu, (1-a^2)*Sigma) with theta_s
    drawn multinomially, preserving the cloud's mean and covariance.
    Out-of-domain draws are re-drawn (same bootstrap pick) up to
    ``max_redraws`` times, then clamped to the boundary.
    """
    if not e.is_normalized():
        e = e.normalized()
    mom = ens.moments(e)
    a = cfg.a
    idx = rng.choice(e.n, size=e.n, p=e.weights)
    centers = a * e.particles[idx] + (1.0 - a) * mom.mean
    if a >= 1.0 or float(np.trace(mom.cov)) <= 0.0:
        new = centers.copy()
    else:
        chol = robust_cholesky(mom.cov) * np.sqrt(1.0 - a * a)
        new = centers + rng.standard_normal((e.n, e.dim)) @ chol.T
        if e.lower is not None:
            out = ~np.all((new >= e.lower) & (new <= e.upper), axis=1)
            tries = 0
            while out.any() and tries < max_redraws:
                k = int(out.sum())
                new[out] = centers[out] + rng.standard_normal((k, e.dim)) @ chol.T
                out = ~np.all((new >= e.lower) & (new <= e.upper), axis=1)
                tries += 1
            if out.any():
                new[out] = np.clip(new[out], e.lower, e.upper)
    return ens.WeightedEnsemble(new, np.full(e.n, 1.0 / e.n), e.lower, e.upper)


# ---------------------------------------------------------------------------
# Random walk Metropolis


@dataclass
class RwmConfig:
    """Gaussian-proposal random walk tuning.

    ``scale`` multiplies the current ensemble std to form the proposal
    std; drivers adapt it multiplicatively between SMC iterations to hold
    the target acceptance rate.  ``proposal_std`` (absolute, per
    dimension) overrides the ensemble-relative rule for standalone
    chains.
    """

    scale: float = 1.0
    target_accept: float = 0.65
    proposal_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("proposal scale must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target acceptance rate must lie in (0, 1)")


def adapt_scale(cfg: RwmConfig, observed_rate: float) -> float:
    """Multiplicative scale update toward the target acceptance rate."""
    if observed_rate > cfg.target_accept:
        cfg.scale *= 1.1
    else:
        cfg.scale /= 1.1
    return cfg.scale


def rwm_move(thetas, logpost_cur, view, prop_chol, rng):
    """One Metropolis step for every row of ``thetas``.

    Returns (positions, cached log posterior, acceptance mask).  The
    cached values avoid re-evaluating the target for rejected rows.
    """
    thetas = np.atleast_2d(thetas)
    m, dim = thetas.shape
    prop = thetas + rng.standard_normal((m, dim)) @ np.atleast_2d(prop_chol).T
    inbox = np.all((prop >= view.lower) & (prop <= view.upper), axis=1)
    lp_prop = np.full(m, -np.inf)
    if inbox.any():
        lp_prop[inbox] = view.logpost(prop[inbox])
    log_u = np.log(rng.random(m))
    accept = inbox & (log_u < lp_prop - logpost_cur)
    new = np.where(accept[:, None], prop, thetas)
    new_lp = np.where(accept, lp_prop, logpost_cur)
    return new, new_lp, accept


def rwm_step(theta, view, cfg: RwmConfig, rng):
    """Single-state random walk Metropolis step.

    Uses ``cfg.proposal_std`` as the absolute proposal scale (required
    outside an SMC driver, where no ensemble std exists).
    """
    if cfg.proposal_std is None:
        raise ValueError("standalone rwm_step needs cfg.proposal_std")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    chol = np.diag(np.atleast_1d(cfg.proposal_std) * cfg.scale)
    lp = view.logpost(theta[None, :])
    new, _, acc = rwm_move(theta[None, :], lp, view, chol, rng)
    return new[0], bool(acc[0])


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo


@dataclass
class HmcConfig:
    """Leapfrog stepsize/length and mass matrix.

    ``mass=None`` lets the driver supply the inverse of the current
    ensemble covariance, the recommended default.
    """

    eps: float = 0.01
    steps: int = 10
    mass: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.eps <= 0 or self.steps < 1:
            raise ValueError("need eps > 0 and steps >= 1")


class MassState:
    """Mass matrix with the factors needed by the dynamics.

    Momentum draws use chol(M); the drift uses M^-1.  Built either from
    an explicit mass or from an ensemble covariance (mass = Sigma^-1).
    """

    def __init__(self, mass, inv_mass, chol_mass):
        self.mass = mass
        self.inv_mass = inv_mass
        self.chol_mass = chol_mass

    @classmethod
    def from_mass(cls, mass) -> "MassState":
        mass = np.atleast_2d(np.asarray(mass, dtype=np.float64))
        chol = np.linalg.cholesky(mass)
        inv = np.linalg.inv(mass)
        return cls(mass, inv, chol)

    @classmethod
    def from_cov(cls, cov) -> "MassState":
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        dim = cov.shape[0]
        cov = cov + COV_REG * np.eye(dim)
        chol_cov = robust_cholesky(cov)
        inv_chol = np.linalg.inv(chol_cov)
        mass = inv_chol.T @ inv_chol
        return cls(mass, cov, inv_chol.T)

    def sample_momentum(self, rng, m):
        dim = self.mass.shape[0]
        return rng.standard_normal((m, dim)) @ self.chol_mass.T

    def kinetic(self, p):
        return 0.5 * np.einsum("ij,jk,ik->i", p, self.inv_mass, p)

    def velocity(self, p):
        return p @ self.inv_mass.T


def _reflect(pos, mom, lower, upper):
    """Fold positions back into the box, flipping crossed momenta.

    Uses the periodic unfolding of the reflected dynamics so that even
    huge excursions fold in O(1).
    """
    width = upper - lower
    period = 2.0 * width
    rel = np.mod(pos - lower, period)
    over = rel > width
    folded = np.where(over, period - rel, rel)
    return lower + folded, np.where(over, -mom, mom)


def leapfrog(theta0, p0, cfg: HmcConfig, grad_potential, lower, upper,
             mass_state: MassState = None, friction=None):
    """Leapfrog integration of Hamilton's equations with wall reflection.

    ``grad_potential(thetas) -> (M, dim)`` is the gradient of
    U = -log posterior.  After every position step, crossed boundaries
    mirror the position and negate the corresponding momentum component.
    An optional ``friction(thetas, p) -> (M, dim)`` force (used by the
    stochastic-gradient variant) is added to each momentum update,
    scaled by that update's timestep.

    Returns (theta_L, p_L, diverged mask, info dict).  Rows flagged as
    diverged saw a non-finite gradient or state and must be rejected by
    the caller.
    """
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    m, dim = theta0.shape
    ms = mass_state or MassState.from_mass(np.eye(dim))
    eps = cfg.eps
    theta, p = theta0.copy(), p0.copy()
    diverged = np.zeros(m, dtype=bool)
    reflections = 0
    # excursions beyond many box widths carry no usable information and
    # would fold back with catastrophic rounding; flag them instead
    width = np.asarray(upper, dtype=np.float64) - np.asarray(lower, dtype=np.float64)
    escape_lo = lower - 1e6 * width
    escape_hi = upper + 1e6 * width

    def kick(dt):
        nonlocal p, diverged
        force = grad_potential(theta)
        if friction is not None:
            force = force + friction(theta, p)
        bad = ~np.isfinite(force).all(axis=1)
        diverged |= bad
        p = p - dt * np.where(bad[:, None], 0.0, force)

    kick(eps / 2.0)
    for k in range(cfg.steps):
        theta = theta + eps * ms.velocity(p)
        bad = ~np.isfinite(theta).all(axis=1)
        bad |= np.any((theta < escape_lo) | (theta > escape_hi), axis=1)
        diverged |= bad
        theta[bad] = theta0[bad]
        inbox = np.all((theta >= lower) & (theta <= upper), axis=1)
        if not inbox.all():
            reflections += int((~inbox).sum())
            theta, p = _reflect(theta, p, lower, upper)
        if k != cfg.steps - 1:
            kick(eps)
    kick(eps / 2.0)
    return theta, p, diverged, {"reflections": reflections}


@dataclass
class HmcResult:
    theta: np.ndarray
    logpost: np.ndarray
    accepted: np.ndarray
    accept_prob: np.ndarray
    diverged: np.ndarray


def hmc_move(thetas, logpost_cur, view, cfg: HmcConfig, rng,
             mass_state: MassState = None) -> HmcResult:
    """One HMC transition per row: momentum draw, leapfrog, energy test.

    The proposal is the trajectory endpoint with negated momentum;
    acceptance probability is min(1, exp(H(v) - H(v'))).  Divergent
    trajectories are never accepted.
    """
    thetas = np.atleast_2d(thetas)
    m, dim = thetas.shape
    ms = mass_state or (MassState.from_mass(cfg.mass) if cfg.mass is not None
                        else MassState.from_mass(np.eye(dim)))
    p0 = ms.sample_momentum(rng, m)
    grad_u = lambda th: -view.grad_logpost(th)
    th1, p1, diverged, _ = leapfrog(thetas, p0, cfg, grad_u, view.lower, view.upper, ms)
    p_prop = -p1
    lp1 = np.full(m, -np.inf)
    ok = ~diverged
    if ok.any():
        lp1[ok] = view.logpost(th1[ok])
    h0 = -logpost_cur + ms.kinetic(p0)
    h1 = -lp1 + ms.kinetic(p_prop)
    with np.errstate(invalid="ignore"):
        log_a = np.minimum(0.0, h0 - h1)
    log_a = np.where(np.isfinite(log_a), log_a, -np.inf)
    diverged |= (h1 - h0) > DIVERGENCE_DH
    log_a[diverged] = -np.inf
    accept = np.log(rng.random(m)) < log_a
    new = np.where(accept[:, None], th1, thetas)
    new_lp = np.where(accept, lp1, logpost_cur)
    return HmcResult(new, new_lp, accept, np.exp(log_a), diverged)


def hmc_step(theta, view, cfg: HmcConfig, rng, mass_state: MassState = None):
    """Single-state HMC step; returns (theta', accepted, accept prob)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    lp = view.logpost(theta[None, :])
    r = hmc_move(theta[None, :], lp, view, cfg, rng, mass_state)
    return r.theta[0], bool(r.accepted[0]), float(r.accept_prob[0])


# ---------------------------------------------------------------------------
# Hybrid HMC -> RWM


@dataclass
class HybridConfig:
    """Low-acceptance screen for chaining RWM after HMC.

    ``threshold`` acts on a running (exponentially weighted) estimate of
    the HMC acceptance probability; below it, each HMC step is followed
    by a cheap random-walk step that can hop out of zero-probability
    traps.  The estimate starts pessimistic so the walk carries the early
    exploration.
    """

    threshold: float = 0.01
    ewma: float = 0.2
    initial_estimate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("screen threshold must lie in (0, 1)")


@dataclass
class HybridState:
    """Running ensemble-level HMC acceptance estimate."""

    estimate: float = 0.0


def hybrid_move(thetas, logpost_cur, view, hmc_cfg, rwm_chol, cfg: HybridConfig,
                state: HybridState, rng, mass_state=None):
    """HMC for all rows; chains an RWM step when the screen is active.

    Returns (positions, log posterior, info).  ``info['kernel']`` is
    "hmc" when HMC stood alone and "hmc+rwm" when the screen fired;
    ``info['hmc_accept_prob']`` is the mean acceptance probability of
    this batch's HMC attempts.
    """
    screened = state.estimate < cfg.threshold
    r = hmc_move(thetas, logpost_cur, view, hmc_cfg, rng, mass_state)
    batch_prob = float(np.mean(r.accept_prob))
    state.estimate += cfg.ewma * (batch_prob - state.estimate)
    new, new_lp = r.theta, r.logpost
    accept = r.accepted
    if screened:
        new, new_lp, rwm_acc = rwm_move(new, new_lp, view, rwm_chol, rng)
        accept = accept | rwm_acc
    info = {
        "kernel": "hmc+rwm" if screened else "hmc",
        "hmc_accept_prob": batch_prob,
        "hmc_accepted": r.accepted,
    }
    return new, new_lp, accept, info


def hybrid_step(theta, view, hmc_cfg, rwm_cfg, cfg: HybridConfig,
                state: HybridState, rng):
    """Single-state hybrid step; returns (theta', accepted, which kernel)."""
    if rwm_cfg.proposal_std is None:
        raise ValueError("standalone hybrid_step needs rwm_cfg.proposal_std")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    chol = np.diag(np.atleast_1d(rwm_cfg.proposal_std) * rwm_cfg.scale)
    lp = view.logpost(theta[None, :])
    new, _, acc, info = hybrid_move(theta[None, :], lp, view, hmc_cfg, chol, cfg, state, rng)
    return new[0], bool(acc[0]), info["kernel"]


# ---------------------------------------------------------------------------
# Stochastic gradient HMC


@dataclass
class SghmcConfig:
    """Friction-augmented HMC with minibatch gradients, no MH correction.

    The gradient-noise variance is estimated from the minibatch's
    per-datum gradient spread; the effective friction is that estimate's
    diffusion matrix (eps * V / 2) plus the configured offset.  Setting
    ``auto_friction=False`` and ``friction=0`` recovers the naive
    stochastic-gradient dynamics.
    """

    eps: float = 0.01
    steps: int = 10
    minibatch: int = 32
    friction: float = 0.0
    auto_friction: bool = True
    mass: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.friction < 0:
            raise ValueError("friction must be nonnegative")


def sghmc_move(thetas, spec: ModelSpec, dataset: Dataset, cfg: SghmcConfig,
               rng, mass_state: MassState = None, power: float = 1.0):
    """One friction-augmented trajectory per row; endpoint always kept.

    A fresh with-replacement minibatch is drawn for every momentum
    update.  With ``minibatch >= len(dataset)`` the exact full-data
    gradient is used and the noise estimate is zero.
    """
    thetas = np.atleast_2d(thetas)
    m, dim = thetas.shape
    n = len(dataset)
    ms = mass_state or (MassState.from_mass(cfg.mass) if cfg.mass is not None
                        else MassState.from_mass(np.eye(dim)))
    c1, c2 = dataset.controls_arrays(spec)
    full_batch = cfg.minibatch >= n

    state = {"friction_mats": None}

    def grad_potential(th):
        if full_batch:
            g = _backend.grad_loglike_sum(
                spec.code, spec.hyper_arr, th, c1, c2, dataset.outcomes
            )
            state["friction_mats"] = None
            return -power * g
        idx = rng.integers(0, n, size=(th.shape[0], cfg.minibatch))
        per = _backend.grad_loglike_terms_indexed(
            spec.code, spec.hyper_arr, th, c1, c2, dataset.outcomes, idx
        )
        per = np.where(np.isfinite(per), per, 0.0)
        g = per.mean(axis=1) * n
        if cfg.auto_friction:
            centered = per - per.mean(axis=1, keepdims=True)
            v_hat = (
                np.einsum("ijk,ijl->ikl", centered, centered)
                / max(cfg.minibatch - 1, 1)
                * (n * n / cfg.minibatch)
            ) * power**2
            state["friction_mats"] = cfg.eps * v_hat / 2.0
        else:
            state["friction_mats"] = None
        return -power * g

    inv_mass_lmax = float(np.linalg.eigvalsh(ms.inv_mass).max())

    def friction(th, p):
        vel = ms.velocity(p)
        force = cfg.friction * vel
        if state["friction_mats"] is not None:
            mats = state["friction_mats"]
            # keep the explicit-Euler damping stable: a kick may at most
            # cancel the momentum (overdamped limit), never reverse it
            lam_max = np.clip(np.linalg.eigvalsh(mats).max(axis=1), 1e-300, None)
            cap = np.minimum(1.0, 1.0 / (cfg.eps * lam_max * inv_mass_lmax))
            force = force + cap[:, None] * np.einsum("ijk,ik->ij", mats, vel)
        return force

    p0 = ms.sample_momentum(rng, m)
    hcfg = HmcConfig(eps=cfg.eps, steps=cfg.steps)
    th1, _, diverged, _ = leapfrog(
        thetas, p0, hcfg, grad_potential, spec.lower, spec.upper, ms, friction=friction
    )
    th1 = np.where(diverged[:, None], thetas, th1)
    return th1


def sghmc_step(theta, spec, dataset, cfg: SghmcConfig, rng,
               mass_state: MassState = None, power: float = 1.0):
    """Single-state stochastic-gradient HMC step."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    return sghmc_move(theta[None, :], spec, dataset, cfg, rng, mass_state, power)[0]


# ---------------------------------------------------------------------------
# Gaussian rejection filtering


@dataclass
class GrfConfig:
    """Sample budget of one Gaussian-rejection Bayes update."""

    samples: int = 1000

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least 2 samples per update")


@dataclass
class GrfResult:
    moments: ens.Moments
    n_accepted: int
    updated: bool


def grf_update(prior: ens.Moments, spec: ModelSpec, d, cfg: GrfConfig, rng) -> GrfResult:
    """One rejection-filtered Bayes update of a Gaussian belief.

    Draws from N(prior), accepts each sample with probability equal to
    its likelihood (a valid acceptance probability for binary-outcome
    models), and refits a Gaussian to the survivors.  Draws outside the
    domain box are rejected.  If nothing survives, the draw is repeated
    once with twice the budget, after which the prior is returned
    unchanged and flagged.
    """
    from . import models as _m

    chol = robust_cholesky(prior.cov)
    c1, c2 = _m._controls_arrays(spec, d)
    budget = cfg.samples
    for attempt in range(2):
        draws = prior.mean + rng.standard_normal((budget, spec.dim)) @ chol.T
        inbox = spec.contains(draws)
        p1 = _backend.prob_one(spec.code, spec.hyper_arr, draws, c1[0], c2[0])
        like = np.where(d.outcome == 1, p1, 1.0 - p1)
        accept = inbox & (rng.random(budget) < like)
        k = int(accept.sum())
        if k >= 2:
            kept = draws[accept]
            mean = kept.mean(axis=0)
            centered = kept - mean
            cov = centered.T @ centered / k
            return GrfResult(ens.Moments(mean, cov, np.sqrt(np.clip(np.diag(cov), 0, None))), k, True)
        budget *= 2
    return GrfResult(prior, 0, False)
