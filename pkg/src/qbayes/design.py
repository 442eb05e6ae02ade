"""Choosing the next experimental control.

Offline schedules (fixed grid, exponential ladder, random draws) and
adaptive heuristics (reciprocal uncertainty, particle guess, occupation
rate) plus a greedy one-step expected-variance minimizer.  Every rule
honors the configured time cap, which keeps evolutions inside the
coherence window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend, ensemble as ens
from .errors import DegenerateUncertaintyError
from .models import ModelSpec


class PghFallbackWarning(UserWarning):
    """Particle-guess draws kept colliding; reciprocal-std rule used."""


@dataclass
class HeuristicConfig:
    """Which rule picks the controls, and its constants."""

    kind: str = "fixed-grid"
    increment: float = 0.08
    t_min: float = 0.0
    base: float = 1.0
    exp_base: float = 9.0 / 8.0
    c1: float = 10.0
    c2: float = 5.0
    t_max: Optional[float] = None
    candidates: int = 20
    candidate_spread: float = 0.3
    occupation_bins: int = 20

    _KINDS = ("fixed-grid", "random", "incremental-random", "exponential",
              "sigma-inverse", "pgh", "occupation", "greedy-variance")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown heuristic kind {self.kind!r}")
        for name in ("increment", "base", "exp_base", "c1", "c2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.candidates < 1:
            raise ValueError("need at least one greedy candidate")


def _cap(t: float, cfg: Optional[HeuristicConfig]) -> float:
    if cfg is not None and cfg.t_max is not None:
        return min(t, cfg.t_max)
    return t


def sigma_inverse_time(moments: ens.Moments, cfg: HeuristicConfig = None) -> float:
    """t = 1 / sigma; multi-dimensional clouds use the largest marginal std."""
    sigma = float(np.max(moments.std))
    if sigma <= 0.0:
        raise DegenerateUncertaintyError("zero spread; reciprocal rule undefined")
    return _cap(1.0 / sigma, cfg)


def pgh_time(e: ens.WeightedEnsemble, rng, cfg: HeuristicConfig = None,
             max_redraws: int = 100) -> float:
    """Reciprocal distance of two weighted posterior draws.

    Identical draws are re-drawn up to ``max_redraws`` times, after which
    the rule falls back to sigma_inverse_time with a warning.
    """
    if e.n < 2:
        raise ValueError("need at least two particles")
    w = e.weights / e.weights.sum()
    for _ in range(max_redraws):
        i, j = rng.choice(e.n, size=2, p=w)
        d = float(np.linalg.norm(e.particles[i] - e.particles[j]))
        if d > 0.0:
            return _cap(1.0 / d, cfg)
    warnings.warn("particle-guess draws collided; using 1/sigma",
                  PghFallbackWarning)
    return sigma_inverse_time(ens.moments(e), cfg)


def occupation_time(e: ens.WeightedEnsemble, ess_value: float, n_particles: int,
                    cfg: HeuristicConfig) -> float:
    """t = base / (occupation rate * ESS / M).

    The occupied-cell fraction proxies the spread (robust to
    multimodality); the ESS ratio keeps the times growing between
    resampling events, when the particle positions are frozen.
    """
    occ = ens.occupation_rate(e, cfg.occupation_bins)
    ratio = ess_value / n_particles
    return _cap(cfg.base / (occ * ratio), cfg)


def greedy_candidates(moments: ens.Moments, cfg: HeuristicConfig, rng) -> np.ndarray:
    """Log-normal cloud of candidate times around 1/sigma."""
    center = 1.0 / float(np.max(moments.std))
    draws = center * np.exp(cfg.candidate_spread * rng.standard_normal(cfg.candidates))
    if cfg.t_max is not None:
        draws = np.minimum(draws, cfg.t_max)
    return draws


def expected_posterior_variances(e: ens.WeightedEnsemble, spec: ModelSpec,
                                 candidates) -> np.ndarray:
    """Expected posterior variance after one shot, per candidate time.

    Both the outcome marginal P(D) and the hypothetical posterior
    variances Var(theta | D) are computed from the current cloud by
    exhaustive enumeration of the two outcomes.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    w = e.weights / e.weights.sum()
    out = np.empty(len(candidates))
    for i, t in enumerate(candidates):
        p1 = _backend.prob_one(spec.code, spec.hyper_arr, e.particles,
                               np.float64(t), np.float64(0.0))
        risk = 0.0
        for outcome, like in ((1, p1), (0, 1.0 - p1)):
            wl = w * like
            mass = float(wl.sum())
            if mass <= 0.0:
                continue
            wn = wl / mass
            mean = wn @ e.particles
            var = float(np.sum(wn[:, None] * (e.particles - mean) ** 2))
            risk += mass * var
        out[i] = risk
    return out


def greedy_variance_time(e: ens.WeightedEnsemble, spec: ModelSpec, candidates,
                         cfg: HeuristicConfig = None) -> float:
    """Candidate time minimizing the one-step expected posterior variance.

    Ties break toward the smallest time (cheapest experiment).
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    risks = expected_posterior_variances(e, spec, candidates)
    best = np.min(risks)
    t = float(np.min(candidates[risks == best]))
    return _cap(t, cfg)


def schedule_times(kind: str, k: int, cfg: HeuristicConfig, rng=None) -> float:
    """Offline time schedules indexed by the iteration counter k >= 1."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    if kind == "fixed-grid":
        return _cap(cfg.t_min + k * cfg.increment, cfg)
    if kind == "exponential":
        return _cap(cfg.exp_base**k, cfg)
    if kind == "random":
        hi = cfg.t_max if cfg.t_max is not None else cfg.base
        return float(rng.uniform(0.0, hi))
    if kind == "incremental-random":
        hi = cfg.c1 * (np.floor(k / cfg.c2) + 1.0)
        return _cap(float(rng.uniform(0.0, hi)), cfg)
    raise ValueError(f"{kind!r} is not an offline schedule")


def ipe_controls(moments: ens.Moments, rng, m_cap: int = 10**6):
    """Discrete reciprocal-uncertainty rule for phase estimation.

    The repetition count plays the role of the evolution time
    (m ~ 1/sigma, capped); the rotation angle is drawn uniformly so
    consecutive circuits probe different quadratures.
    """
    sigma = float(np.max(moments.std))
    if sigma <= 0.0:
        raise DegenerateUncertaintyError("zero spread; phase rule undefined")
    m = int(np.clip(np.ceil(1.0 / sigma), 1, m_cap))
    theta_ctl = float(rng.uniform(0.0, 2.0 * np.pi))
    return m, theta_ctl


def next_control_time(e: ens.WeightedEnsemble, ess_value: float, k: int,
                      spec: ModelSpec, cfg: HeuristicConfig, rng) -> float:
    """Dispatch to the configured heuristic for the next evolution time."""
    if cfg.kind in ("fixed-grid", "exponential", "random", "incremental-random"):
        return schedule_times(cfg.kind, k, cfg, rng)
    if cfg.kind == "sigma-inverse":
        return sigma_inverse_time(ens.moments(e), cfg)
    if cfg.kind == "pgh":
        return pgh_time(e, rng, cfg)
    if cfg.kind == "occupation":
        return occupation_time(e, ess_value, e.n, cfg)
    if cfg.kind == "greedy-variance":
        cands = greedy_candidates(ens.moments(e), cfg, rng)
        return greedy_variance_time(e, spec, cands, cfg)
    raise ValueError(f"unknown heuristic kind {cfg.kind!r}")
