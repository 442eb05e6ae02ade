"""Weighted particle clouds and the statistics computed from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend, models
from .errors import DegenerateEnsembleError, QBayesError

_NORM_TOL = 1e-8


@dataclass
class Moments:
    """Weighted mean / covariance / marginal std of a cloud."""

    mean: np.ndarray
    cov: np.ndarray
    std: np.ndarray

    @property
    def total_std(self) -> float:
        """sqrt of the trace of the covariance (scalar spread measure)."""
        return float(np.sqrt(np.trace(self.cov)))


@dataclass
class WeightedEnsemble:
    """Particle positions (M, dim) with normalized weights (M,).

    The domain box travels with the cloud so that grid-based statistics
    (occupation rate) and boundary-aware kernels need no extra context.
    """

    particles: np.ndarray
    weights: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.particles.shape[0] != self.weights.shape[0]:
            raise ValueError("particles and weights must have equal length")

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def is_normalized(self) -> bool:
        return abs(float(self.weights.sum()) - 1.0) <= _NORM_TOL

    def normalized(self) -> "WeightedEnsemble":
        tot = float(self.weights.sum())
        if tot <= 0:
            raise DegenerateEnsembleError("weights sum to zero")
        return WeightedEnsemble(self.particles, self.weights / tot, self.lower, self.upper)

    @classmethod
    def from_prior(cls, spec: models.ModelSpec, n: int, rng) -> "WeightedEnsemble":
        """Uniform draw over the model's domain box, equal weights."""
        pts = rng.uniform(spec.lower, spec.upper, size=(n, spec.dim))
        return cls(pts, np.full(n, 1.0 / n), spec.lower.copy(), spec.upper.copy())


def _require_normalized(e: WeightedEnsemble):
    if not e.is_normalized():
        raise QBayesError("ensemble weights are not normalized")


def reweight_log(weights: np.ndarray, log_l: np.ndarray, power: float = 1.0):
    """Multiply weights by L^power in log space.

    Returns the normalized weights together with the log of the
    normalizer log(sum_i w_i L_i^power); the shift-by-max keeps long
    products of tiny likelihoods from underflowing.
    """
    logw = np.where(weights > 0.0, np.log(np.where(weights > 0, weights, 1.0)), -np.inf)
    logw = logw + power * log_l
    shift = np.max(logw)
    if not np.isfinite(shift) or shift <= _backend.LOG_FLOOR:
        raise DegenerateEnsembleError("every particle has zero likelihood")
    w = np.exp(logw - shift)
    tot = float(w.sum())
    return w / tot, float(shift + np.log(tot))


def reweight(e: WeightedEnsemble, spec: models.ModelSpec, d: models.Datum,
             power: float = 1.0):
    """Bayes update of the weights by one datum's likelihood^power.

    Returns ``(ensemble, C)`` with C the normalizer sum_i w_i L_i^power,
    the per-iteration factor of the model evidence.
    """
    _require_normalized(e)
    if not 0.0 < power <= 1.0:
        raise ValueError("power must lie in (0, 1]")
    c1, c2 = models._controls_arrays(spec, d)
    log_l = _backend.loglike_sum(
        spec.code, spec.hyper_arr, e.particles, c1, c2, np.array([d.outcome])
    )
    w, log_c = reweight_log(e.weights, log_l, power)
    return WeightedEnsemble(e.particles, w, e.lower, e.upper), float(np.exp(log_c))


def ess(e: WeightedEnsemble) -> float:
    """Effective sample size 1 / sum_i w_i^2, in [1, M]."""
    _require_normalized(e)
    return float(1.0 / np.sum(e.weights**2))


def multinomial_resample(e: WeightedEnsemble, rng) -> WeightedEnsemble:
    """Draw M particles with replacement; output weights are uniform."""
    _require_normalized(e)
    idx = rng.choice(e.n, size=e.n, p=e.weights)
    return WeightedEnsemble(
        e.particles[idx].copy(), np.full(e.n, 1.0 / e.n), e.lower, e.upper
    )


def moments(e: WeightedEnsemble) -> Moments:
    """Weighted mean and (population) covariance of the cloud."""
    _require_normalized(e)
    mean = e.weights @ e.particles
    centered = e.particles - mean
    cov = (centered * e.weights[:, None]).T @ centered
    cov = 0.5 * (cov + cov.T)
    var = np.clip(np.diag(cov), 0.0, None)
    return Moments(mean, cov, np.sqrt(var))


def occupation_rate(e: WeightedEnsemble, grid_bins_per_dim: int = 20,
                    lower=None, upper=None) -> float:
    """Fraction of occupied cells in a regular partition of the domain box.

    A cell counts as occupied when at least one particle falls in it; the
    rate is a multimodality-robust proxy for the spread of the cloud.
    """
    lo = e.lower if lower is None else lower
    hi = e.upper if upper is None else upper
    if lo is None or hi is None:
        raise ValueError("occupation_rate needs the domain box")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    bins = int(grid_bins_per_dim)
    if bins < 1 or e.n < 1:
        raise ValueError("need bins >= 1 and at least one particle")
    rel = (e.particles - lo) / (hi - lo)
    cells = np.clip((rel * bins).astype(np.int64), 0, bins - 1)
    flat = cells @ (bins ** np.arange(e.dim, dtype=np.int64))
    occupied = np.unique(flat).size
    return occupied / float(bins**e.dim)


@dataclass
class ModeMetricConfig:
    """Success thresholds for mode-based diagnostics (all config-exposed)."""

    max_dist_frac: float = 0.05
    max_std_frac: float = 0.05
    max_calibration_err: float = 0.5
    coverage_factor: float = 3.0


@dataclass
class ModeMetrics:
    """Per-mode breakdown of a cloud against known posterior modes."""

    mode_weights: np.ndarray
    centroid_dists: np.ndarray
    mode_stds: np.ndarray
    mode_real_errs: np.ndarray
    avg_dist: float
    overall_std: float
    overall_real_err: float
    covered: np.ndarray = field(default=None)
    success: bool = False
    checks: dict = field(default_factory=dict)

    @property
    def coverage_fraction(self) -> float:
        return float(np.mean(self.covered))


def mode_metrics(e: WeightedEnsemble, modes, cfg: ModeMetricConfig = None) -> ModeMetrics:
    """Assign particles to their nearest mode and score the cloud.

    Success is the conjunction of accuracy (mean distance to the assigned
    mode), precision (weighted average of per-mode stds), calibration
    (estimated spread within a factor two of the actual error around the
    true modes) and coverage (no mode starved or monopolized by more than
    ``coverage_factor`` relative to an even split).
    """
    _require_normalized(e)
    cfg = cfg or ModeMetricConfig()
    modes = np.atleast_2d(np.asarray(modes, dtype=np.float64))
    n_modes = modes.shape[0]
    if n_modes < 1:
        raise ValueError("need at least one mode")
    if e.lower is not None and e.upper is not None:
        diam = float(np.linalg.norm(np.asarray(e.upper) - np.asarray(e.lower)))
    else:
        diam = float(np.linalg.norm(e.particles.max(0) - e.particles.min(0))) or 1.0

    d2 = ((e.particles[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(e.n), assign])
    avg_dist = float(np.sum(e.weights * dist))

    mode_w = np.zeros(n_modes)
    stds = np.zeros(n_modes)
    real = np.zeros(n_modes)
    cdist = np.zeros(n_modes)
    for j in range(n_modes):
        sel = assign == j
        wj = float(e.weights[sel].sum())
        mode_w[j] = wj
        if wj <= 0.0:
            continue
        pts = e.particles[sel]
        w = e.weights[sel] / wj
        centroid = w @ pts
        cdist[j] = float(np.linalg.norm(centroid - modes[j]))
        stds[j] = float(np.sqrt(np.sum(w * ((pts - centroid) ** 2).sum(axis=1))))
        real[j] = float(np.sqrt(np.sum(w * ((pts - modes[j]) ** 2).sum(axis=1))))

    overall_std = float(np.sum(mode_w * stds))
    overall_real = float(np.sum(mode_w * real))

    even = 1.0 / n_modes
    # a mode counts as covered only when it holds a fair weight share AND
    # that mass sits close to it; a diffuse cloud covers nothing
    covered = (
        (mode_w >= even / cfg.coverage_factor)
        & (mode_w <= even * cfg.coverage_factor)
        & (real <= cfg.max_dist_frac * diam)
    )
    scale = max(overall_std, overall_real)
    calib_ok = (scale <= 1e-12 * diam
                or abs(overall_std - overall_real) / scale <= cfg.max_calibration_err)
    checks = {
        "accuracy": avg_dist <= cfg.max_dist_frac * diam,
        "precision": overall_std <= cfg.max_std_frac * diam,
        "calibration": bool(calib_ok),
        "coverage": bool(covered.all()),
    }
    return ModeMetrics(
        mode_weights=mode_w,
        centroid_dists=cdist,
        mode_stds=stds,
        mode_real_errs=real,
        avg_dist=avg_dist,
        overall_std=overall_std,
        overall_real_err=overall_real,
        covered=covered,
        success=all(checks.values()),
        checks=checks,
    )


def save_csv(e: WeightedEnsemble, path):
    """Snapshot as CSV with columns w, theta_0..theta_{d-1}."""
    header = "w," + ",".join(f"theta_{d}" for d in range(e.dim))
    np.savetxt(
        path,
        np.column_stack([e.weights, e.particles]),
        delimiter=",",
        header=header,
        comments="",
    )


def load_csv(path) -> WeightedEnsemble:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return WeightedEnsemble(raw[:, 1:], raw[:, 0])
