"""Sequential drivers: SIR over cumulative data and tempered estimation.

Both drivers keep log weights throughout, record the per-iteration
normalizers (whose product is the model evidence), trigger a resampling
plus move phase when the effective sample size drops below the
configured fraction, and emit a full per-iteration trace.

The stepping form (:class:`SirSampler`) processes one datum at a time so
adaptive experiments can interleave design, measurement and update; the
batch functions wrap it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from . import _backend, ensemble as ens, kernels, subsampling as subs
from .errors import DegenerateEnsembleError
from .models import Dataset, Datum, ModelSpec


@dataclass
class EcsKernelConfig:
    """Subsample size and block count for energy-conserving moves."""

    m: int = 50
    blocks: int = 3


@dataclass
class SirConfig:
    """Driver configuration shared by the SIR and tempered runs."""

    n_particles: int = 100
    resample_threshold: float = 0.5
    moves_per_resample: int = 1
    kernel: str = "rwm"
    ordering: str = "as-given"
    move_every_step: bool = False
    lw: kernels.LiuWestConfig = field(default_factory=kernels.LiuWestConfig)
    rwm: kernels.RwmConfig = field(default_factory=kernels.RwmConfig)
    hmc: kernels.HmcConfig = field(default_factory=lambda: kernels.HmcConfig(eps=0.1, steps=10))
    sghmc: kernels.SghmcConfig = field(default_factory=kernels.SghmcConfig)
    hybrid: kernels.HybridConfig = field(default_factory=kernels.HybridConfig)
    ecs: EcsKernelConfig = field(default_factory=EcsKernelConfig)

    _KERNELS = ("lw", "rwm", "hmc", "hybrid", "sghmc", "ecs", "none")

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 0.0 < self.resample_threshold <= 1.0:
            raise ValueError("resample threshold ratio must lie in (0, 1]")
        if self.kernel not in self._KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")


@dataclass
class TemperSchedule:
    """Strictly increasing exponents ending at 1."""

    exponents: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.exponents, dtype=np.float64)
        if g.ndim != 1 or len(g) < 1:
            raise ValueError("need at least one exponent")
        if np.any(np.diff(g) <= 0) or not 0 < g[0] or g[-1] != 1.0:
            raise ValueError("exponents must be strictly increasing in (0, 1] ending at 1")
        self.exponents = g

    @classmethod
    def even(cls, n_stages: int) -> "TemperSchedule":
        return cls(np.arange(1, n_stages + 1) / n_stages)

    def increments(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.exponents]))


@dataclass
class RunTrace:
    """Per-iteration record of one run."""

    iters: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray
    evidence_log: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    accept_rate: np.ndarray
    control: np.ndarray
    kernel_labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.iters)

    def to_csv(self, path):
        dim = self.means.shape[1]
        cols = (["iter", "ess", "resampled", "evidence_log"]
                + [f"mean_{d}" for d in range(dim)]
                + [f"std_{d}" for d in range(dim)]
                + ["accept_rate", "control_t"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(len(self)):
                w.writerow(
                    [int(self.iters[i]), f"{self.ess[i]:.6g}", int(self.resampled[i]),
                     f"{self.evidence_log[i]:.12g}"]
                    + [f"{v:.12g}" for v in self.means[i]]
                    + [f"{v:.12g}" for v in self.stds[i]]
                    + [f"{self.accept_rate[i]:.6g}", f"{self.control[i]:.12g}"]
                )


class _TraceBuilder:
    def __init__(self, dim):
        self.rows = []
        self.dim = dim

    def add(self, it, ess_v, resampled, ev_log, mean, std, acc, control, label=""):
        self.rows.append((it, ess_v, resampled, ev_log, np.array(mean), np.array(std),
                          acc, control, label))

    def build(self) -> RunTrace:
        if not self.rows:
            z = np.empty(0)
            return RunTrace(z, z, z.astype(bool), z, np.empty((0, self.dim)),
                            np.empty((0, self.dim)), z, z, [])
        cols = list(zip(*self.rows))
        return RunTrace(
            np.array(cols[0], dtype=np.int64),
            np.array(cols[1]),
            np.array(cols[2], dtype=bool),
            np.array(cols[3]),
            np.vstack(cols[4]),
            np.vstack(cols[5]),
            np.array(cols[6]),
            np.array(cols[7]),
            list(cols[8]),
        )


def evidence(trace: RunTrace) -> float:
    """Model evidence: the product of per-iteration weight normalizers."""
    return float(np.exp(log_evidence(trace)))


def log_evidence(trace: RunTrace) -> float:
    return float(trace.evidence_log[-1]) if len(trace) else 0.0


def order_dataset(dataset: Dataset, policy: str, rng=None) -> Dataset:
    """Stable reorder of the rows by the named policy."""
    if policy == "as-given":
        return dataset
    if policy == "time-ascending":
        return dataset.subset(np.argsort(dataset.t, kind="stable"))
    if policy == "time-descending":
        return dataset.subset(np.argsort(-dataset.t, kind="stable"))
    if policy == "random":
        if rng is None:
            raise ValueError("random ordering needs an RNG")
        return dataset.subset(rng.permutation(len(dataset)))
    raise ValueError(f"unknown ordering policy {policy!r}")


class _MoveEngine:
    """Applies the configured Markov kernel to a particle batch.

    Owns the adaptive state that persists across move phases: the RWM
    proposal scale, the hybrid screen estimate, and (for the subsampled
    kernel) every particle's index set.
    """

    def __init__(self, spec: ModelSpec, cfg: SirConfig):
        self.spec = spec
        self.cfg = cfg
        self.rwm = replace(cfg.rwm)
        self.hybrid_state = kernels.HybridState(cfg.hybrid.initial_estimate)
        self.ecs_idx: Optional[np.ndarray] = None
        self.ecs_next_block = 0
        self.last_stats: dict = {}

    def ensure_ecs_indices(self, m_particles: int, n_data: int, rng):
        if self.ecs_idx is None or self.ecs_idx.shape[0] != m_particles:
            self.ecs_idx = rng.integers(0, n_data, size=(m_particles, self.cfg.ecs.m))
            self.ecs_next_block = 0

    def reindex_ecs(self, chosen):
        if self.ecs_idx is not None:
            self.ecs_idx = self.ecs_idx[chosen]

    def _cloud_factors(self, particles, weights=None):
        m = particles.shape[0]
        w = np.full(m, 1.0 / m) if weights is None else weights
        e = ens.WeightedEnsemble(particles, w)
        mom = ens.moments(e)
        return mom

    def move(self, particles, view, rng, dataset=None, power=1.0,
             estimator_ctx=None):
        """Run ``moves_per_resample`` kernel sweeps over the batch."""
        particles, stats = self._move(particles, view, rng, dataset, power,
                                      estimator_ctx)
        self.last_stats = stats
        return particles, stats

    def _move(self, particles, view, rng, dataset=None, power=1.0,
              estimator_ctx=None):
        cfg = self.cfg
        mom = self._cloud_factors(particles)
        stats = {"accept_rate": np.nan, "kernel": cfg.kernel}
        if cfg.kernel == "none":
            return particles, stats

        if cfg.kernel == "rwm":
            base_chol = kernels.robust_cholesky(mom.cov)
            lp = view.logpost(particles)
            acc = []
            for _ in range(cfg.moves_per_resample):
                particles, lp, a = kernels.rwm_move(
                    particles, lp, view, base_chol * self.rwm.scale, rng)
                acc.append(float(a.mean()))
                # adapt between sweeps so the scale can track a shrinking
                # posterior within one resampling event
                kernels.adapt_scale(self.rwm, acc[-1])
            stats["accept_rate"] = float(np.mean(acc))
            return particles, stats

        if cfg.kernel == "hmc":
            ms = (kernels.MassState.from_mass(cfg.hmc.mass) if cfg.hmc.mass is not None
                  else kernels.MassState.from_cov(mom.cov))
            lp = view.logpost(particles)
            acc = []
            for _ in range(cfg.moves_per_resample):
                r = kernels.hmc_move(particles, lp, view, cfg.hmc, rng, ms)
                particles, lp = r.theta, r.logpost
                acc.append(float(r.accepted.mean()))
            stats["accept_rate"] = float(np.mean(acc))
            return particles, stats

        if cfg.kernel == "hybrid":
            ms = kernels.MassState.from_cov(mom.cov)
            chol = kernels.robust_cholesky(mom.cov) * self.rwm.scale
            lp = view.logpost(particles)
            acc, labels, probs = [], [], []
            for _ in range(cfg.moves_per_resample):
                particles, lp, a, info = kernels.hybrid_move(
                    particles, lp, view, cfg.hmc, chol, cfg.hybrid,
                    self.hybrid_state, rng, ms)
                acc.append(float(a.mean()))
                labels.append(info["kernel"])
                probs.append(info["hmc_accept_prob"])
            stats.update(accept_rate=float(np.mean(acc)),
                         kernel="+".join(sorted(set(labels))),
                         hybrid_labels=labels, hmc_accept_probs=probs)
            return particles, stats

        if cfg.kernel == "sghmc":
            ms = (kernels.MassState.from_mass(cfg.sghmc.mass)
                  if cfg.sghmc.mass is not None
                  else kernels.MassState.from_cov(mom.cov))
            for _ in range(cfg.moves_per_resample):
                particles = kernels.sghmc_move(
                    particles, self.spec, dataset, cfg.sghmc, rng, ms, power)
            return particles, stats

        if cfg.kernel == "ecs":
            if estimator_ctx is None:
                raise ValueError("ecs kernel needs an estimator context")
            self.ensure_ecs_indices(particles.shape[0], len(dataset), rng)
            ms = kernels.MassState.from_cov(mom.cov)
            acc = []
            for _ in range(cfg.moves_per_resample):
                self._ecs_block_refresh(particles, estimator_ctx, rng)
                view_s = subs.SubsampledDataView(estimator_ctx, self.ecs_idx)
                lp = view_s.logpost(particles)
                r = kernels.hmc_move(particles, lp, view_s, cfg.hmc, rng, ms)
                particles = r.theta
                acc.append(float(r.accepted.mean()))
            stats["accept_rate"] = float(np.mean(acc))
            return particles, stats

        raise ValueError(f"unknown kernel {cfg.kernel!r}")

    def _ecs_block_refresh(self, particles, ctx, rng):
        """Vectorized block pseudo-marginal index update, one block."""
        n = len(ctx.dataset)
        m_particles = particles.shape[0]
        bounds = np.linspace(0, self.cfg.ecs.m, self.cfg.ecs.blocks + 1).astype(int)
        b = self.ecs_next_block % self.cfg.ecs.blocks
        sl = slice(bounds[b], bounds[b + 1])
        cur = self.ecs_idx
        prop = cur.copy()
        prop[:, sl] = rng.integers(0, n, size=(m_particles, sl.stop - sl.start))
        l_cur, s2_cur = subs.difference_log_estimator_batch(
            ctx.spec, ctx.dataset, ctx.cv, cur, particles)
        l_prop, s2_prop = subs.difference_log_estimator_batch(
            ctx.spec, ctx.dataset, ctx.cv, prop, particles)
        log_cur = subs.corrected_log_likelihood(l_cur, s2_cur)
        log_prop = subs.corrected_log_likelihood(l_prop, s2_prop)
        accept = np.log(rng.random(m_particles)) < ctx.power * (log_prop - log_cur)
        self.ecs_idx = np.where(accept[:, None], prop, cur)
        self.ecs_next_block += 1


class SirSampler:
    """Stepping SIR: one Bayes update per call, resampling on demand."""

    def __init__(self, spec: ModelSpec, cfg: SirConfig, rng,
                 prior_sampler: Optional[Callable] = None):
        self.spec = spec
        self.cfg = cfg
        self.rng = rng
        if prior_sampler is None:
            pts = rng.uniform(spec.lower, spec.upper, size=(cfg.n_particles, spec.dim))
        else:
            pts = np.atleast_2d(prior_sampler(rng, cfg.n_particles))
        self.particles = pts
        self.logw = np.full(cfg.n_particles, -np.log(cfg.n_particles))
        self.log_z = 0.0
        self.engine = _MoveEngine(spec, cfg)
        self._t, self._m, self._x, self._o = [], [], [], []
        self._trace = _TraceBuilder(spec.dim)
        self.move_stats: list = []
        self.k = 0

    @property
    def weights(self):
        return np.exp(self.logw)

    def ensemble(self) -> ens.WeightedEnsemble:
        w = self.weights
        return ens.WeightedEnsemble(self.particles, w / w.sum(),
                                    self.spec.lower, self.spec.upper)

    def moments(self) -> ens.Moments:
        return ens.moments(self.ensemble())

    def trace(self) -> RunTrace:
        return self._trace.build()

    def _cumulative_dataset(self) -> Dataset:
        return Dataset(np.array(self._t), np.array(self._m, dtype=np.int64),
                       np.array(self._x), np.array(self._o, dtype=np.int64))

    def update(self, d: Datum):
        """Reweight by one datum; resample and move when ESS collapses."""
        self.k += 1
        c = d.controls
        self._t.append(c.t)
        self._m.append(c.m)
        self._x.append(c.theta_ctl)
        self._o.append(d.outcome)
        if self.spec.kind == "ipe":
            c1, c2 = np.array([float(c.m)]), np.array([c.theta_ctl])
            control_val = float(c.m)
        else:
            c1, c2 = np.array([c.t]), np.array([0.0])
            control_val = c.t
        ll = _backend.loglike_sum(
            self.spec.code, self.spec.hyper_arr, self.particles,
            c1, c2, np.array([d.outcome], dtype=np.int64))
        logw_un = self.logw + ll
        log_c = float(logsumexp(logw_un))
        if np.max(logw_un) <= 0.5 * _backend.LOG_FLOOR:
            raise DegenerateEnsembleError(
                f"all particles at zero likelihood at iteration {self.k}",
                iteration=self.k)
        self.logw = logw_un - log_c
        self.log_z += log_c

        w = np.exp(self.logw)
        ess_v = float(1.0 / np.sum(w * w))
        resample = ess_v < self.cfg.resample_threshold * self.cfg.n_particles
        stats = {"accept_rate": np.nan, "kernel": ""}
        if resample and self.cfg.kernel == "lw":
            e = ens.WeightedEnsemble(self.particles, w / w.sum(),
                                     self.spec.lower, self.spec.upper)
            e2 = kernels.liu_west_resample(e, self.cfg.lw, self.rng)
            self.particles = e2.particles
            self.logw = np.full(self.cfg.n_particles, -np.log(self.cfg.n_particles))
        elif resample and self.cfg.kernel != "none":
            chosen = self.rng.choice(self.cfg.n_particles, size=self.cfg.n_particles,
                                     p=w / w.sum())
            self.particles = self.particles[chosen].copy()
            self.engine.reindex_ecs(chosen)
            self.logw = np.full(self.cfg.n_particles, -np.log(self.cfg.n_particles))
            self.particles, stats = self._run_moves()
        elif resample:
            chosen = self.rng.choice(self.cfg.n_particles, size=self.cfg.n_particles,
                                     p=w / w.sum())
            self.particles = self.particles[chosen].copy()
            self.logw = np.full(self.cfg.n_particles, -np.log(self.cfg.n_particles))
        elif self.cfg.move_every_step and self.cfg.kernel not in ("lw", "none"):
            self.particles, stats = self._run_moves()

        mom = self.moments()
        self._trace.add(self.k, ess_v, resample, self.log_z, mom.mean, mom.std,
                        stats.get("accept_rate", np.nan), control_val,
                        stats.get("kernel", ""))

    def _run_moves(self):
        dataset = self._cumulative_dataset()
        view = kernels.FullDataView(self.spec, dataset, power=1.0)
        particles, stats = self.engine.move(self.particles, view, self.rng,
                                            dataset=dataset, power=1.0)
        self.move_stats.append((self.k, stats))
        return particles, stats


def sir_run(spec: ModelSpec, dataset: Dataset, cfg: SirConfig, rng,
            prior_sampler: Optional[Callable] = None):
    """Sequential importance resampling over the dataset, one datum a time."""
    dataset = order_dataset(dataset, cfg.ordering, rng)
    s = SirSampler(spec, cfg, rng, prior_sampler)
    for i in range(len(dataset)):
        s.update(dataset[i])
    return s.ensemble(), s.trace()


def tle_run(spec: ModelSpec, dataset: Dataset, schedule: TemperSchedule,
            cfg: SirConfig, rng, prior_sampler: Optional[Callable] = None,
            cv: Optional[subs.ControlVariates] = None,
            initial_particles: Optional[np.ndarray] = None):
    """Tempered likelihood estimation over full-data posterior powers.

    Stage s reweights every particle by L(theta | all data)^(g_s - g_{s-1})
    and then applies the usual resample/move logic, with kernels
    targeting the g_s-tempered posterior.  The subsampled kernel ("ecs")
    replaces every full-data likelihood with the corrected difference
    estimator at per-particle index sets and needs prebuilt control
    variates.
    """
    m = cfg.n_particles
    if initial_particles is not None:
        particles = np.atleast_2d(np.asarray(initial_particles, dtype=np.float64)).copy()
    elif prior_sampler is None:
        particles = rng.uniform(spec.lower, spec.upper, size=(m, spec.dim))
    else:
        particles = np.atleast_2d(prior_sampler(rng, m))
    logw = np.full(m, -np.log(m))
    log_z = 0.0
    engine = _MoveEngine(spec, cfg)
    trace = _TraceBuilder(spec.dim)
    c1, c2 = dataset.controls_arrays(spec)

    use_ecs = cfg.kernel == "ecs"
    ctx = None
    if use_ecs:
        if cv is None:
            raise ValueError("ecs kernel needs control variates (warm up first)")
        engine.ensure_ecs_indices(m, len(dataset), rng)

    increments = schedule.increments()
    for s_i, (gamma, dg) in enumerate(zip(schedule.exponents, increments), start=1):
        if use_ecs:
            ctx = subs.EstimatorContext(spec, dataset, cv, power=gamma)
            l_hat, s2 = subs.difference_log_estimator_batch(
                spec, dataset, cv, engine.ecs_idx, particles)
            ll = subs.corrected_log_likelihood(l_hat, s2)
        else:
            ll = _backend.loglike_sum(spec.code, spec.hyper_arr, particles,
                                      c1, c2, dataset.outcomes)
        logw_un = logw + dg * ll
        finite = logw_un[np.isfinite(logw_un)]
        if finite.size == 0 or np.max(logw_un) <= 0.5 * _backend.LOG_FLOOR * dg:
            raise DegenerateEnsembleError(
                f"all particles at zero likelihood at stage {s_i}", iteration=s_i)
        log_c = float(logsumexp(logw_un))
        logw = logw_un - log_c
        log_z += log_c

        w = np.exp(logw)
        ess_v = float(1.0 / np.sum(w * w))
        resample = ess_v < cfg.resample_threshold * m
        stats = {"accept_rate": np.nan, "kernel": cfg.kernel}
        if resample and cfg.kernel == "lw":
            e = ens.WeightedEnsemble(particles, w / w.sum(), spec.lower, spec.upper)
            particles = kernels.liu_west_resample(e, cfg.lw, rng).particles
            logw = np.full(m, -np.log(m))
        elif resample and cfg.kernel != "none":
            chosen = rng.choice(m, size=m, p=w / w.sum())
            particles = particles[chosen].copy()
            engine.reindex_ecs(chosen)
            logw = np.full(m, -np.log(m))
            view = kernels.FullDataView(spec, dataset, power=gamma)
            particles, stats = engine.move(particles, view, rng, dataset=dataset,
                                           power=gamma, estimator_ctx=ctx)
        elif resample:
            chosen = rng.choice(m, size=m, p=w / w.sum())
            particles = particles[chosen].copy()
            logw = np.full(m, -np.log(m))

        wn = np.exp(logw)
        e = ens.WeightedEnsemble(particles, wn / wn.sum(), spec.lower, spec.upper)
        mom = ens.moments(e)
        trace.add(s_i, ess_v, resample, log_z, mom.mean, mom.std,
                  stats.get("accept_rate", np.nan), gamma, stats.get("kernel", ""))

    w = np.exp(logw)
    out = ens.WeightedEnsemble(particles, w / w.sum(), spec.lower, spec.upper)
    return out, trace.build()


def mcmc_ensemble_run(spec: ModelSpec, dataset: Dataset, cfg: SirConfig,
                      n_steps: int, rng,
                      prior_sampler: Optional[Callable] = None):
    """A bank of parallel MCMC chains on the full-data posterior.

    Unlike the SMC drivers, every step sees the whole dataset; the
    cross-chain covariance tunes the proposal scale and mass matrix.
    Returns the final chain states as an equally weighted ensemble plus a
    trace with per-step acceptance statistics.
    """
    m = cfg.n_particles
    if prior_sampler is None:
        particles = rng.uniform(spec.lower, spec.upper, size=(m, spec.dim))
    else:
        particles = np.atleast_2d(prior_sampler(rng, m))
    engine = _MoveEngine(spec, cfg)
    trace = _TraceBuilder(spec.dim)
    view = kernels.FullDataView(spec, dataset, power=1.0)
    for step in range(1, n_steps + 1):
        particles, stats = engine.move(particles, view, rng, dataset=dataset, power=1.0)
        e = ens.WeightedEnsemble(particles, np.full(m, 1.0 / m), spec.lower, spec.upper)
        mom = ens.moments(e)
        trace.add(step, float(m), False, 0.0, mom.mean, mom.std,
                  stats.get("accept_rate", np.nan), 0.0, stats.get("kernel", ""))
    e = ens.WeightedEnsemble(particles, np.full(m, 1.0 / m), spec.lower, spec.upper)
    return e, trace.build()
