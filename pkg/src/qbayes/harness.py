"""Experiment harness: configs, batched runs, aggregation, persistence.

Configs are flat ``key=value`` text with dotted keys (diff-friendly and
language-neutral).  A batch executes ``runs`` independent seeded runs:
offline runs pre-generate a dataset, order it, then infer; adaptive runs
interleave heuristic -> simulate -> update.  Each run owns three RNG
streams spawned from its seed (device, sampler, design) so that
replaying a recorded adaptive dataset through the sampler stream reproduces
the inference exactly.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import design, ensemble as ens, kernels, models, smc, subsampling as subs
from .errors import ConfigError, DegenerateEnsembleError, FitError, QBayesError


# ---------------------------------------------------------------------------
# Configuration


def parse_config_text(text: str) -> dict:
    """Flat dotted-key config parser; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _get(kv, key, cast, default):
    if key not in kv:
        return default
    raw = kv.pop(key)
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {raw!r}", key=key) from exc


def _floats(raw: str):
    return [float(x) for x in raw.split(",") if x.strip() != ""]


@dataclass
class ExperimentConfig:
    """Everything one batch of runs needs, validated."""

    model_kind: str = "precession"
    dim: int = 1
    lower: list = field(default_factory=lambda: [0.0])
    upper: list = field(default_factory=lambda: [1.0])
    hyper_a: Optional[float] = None
    hyper_b: Optional[float] = None
    truth: Optional[list] = None
    dataset_path: Optional[str] = None

    sampler_kind: str = "sir"
    sir: smc.SirConfig = field(default_factory=smc.SirConfig)
    mcmc_steps: int = 30
    tle_stages: int = 10
    grf: kernels.GrfConfig = field(default_factory=kernels.GrfConfig)
    ecs_warmup_fraction: float = 0.4

    heuristic: design.HeuristicConfig = field(default_factory=design.HeuristicConfig)
    adaptive: bool = False
    experiments: int = 100
    shots: int = 1
    ipe_m_cap: int = 10**6

    runs: int = 1
    seed: int = 0
    out: Optional[str] = None
    workers: int = 1
    save_traces: bool = False

    def __post_init__(self):
        if (self.truth is None) == (self.dataset_path is None):
            raise ConfigError("exactly one of truth / dataset must be set", key="truth")
        if self.sampler_kind not in ("sir", "tle", "mcmc", "grf"):
            raise ConfigError(f"unknown sampler {self.sampler_kind!r}", key="sampler.kind")
        if self.adaptive and self.sampler_kind in ("tle", "mcmc"):
            raise ConfigError("tempered/mcmc runs use the complete dataset and "
                              "cannot be adaptive", key="adaptive")
        if self.runs < 1:
            raise ConfigError("need at least one run", key="runs")

    @classmethod
    def from_dict(cls, kv: dict) -> "ExperimentConfig":
        kv = dict(kv)
        model_kind = _get(kv, "model.kind", str, "precession")
        dim = _get(kv, "model.dim", int, models._FIXED_DIM.get(model_kind, 1))
        lower = _get(kv, "model.lower", _floats, [0.0] * dim)
        upper = _get(kv, "model.upper", _floats, [1.0] * dim)
        if len(lower) == 1 and dim > 1:
            lower = lower * dim
        if len(upper) == 1 and dim > 1:
            upper = upper * dim
        sir = smc.SirConfig(
            n_particles=_get(kv, "sampler.particles", int, 100),
            resample_threshold=_get(kv, "sampler.threshold", float, 0.5),
            moves_per_resample=_get(kv, "sampler.moves", int, 1),
            kernel=_get(kv, "sampler.kernel", str, "rwm"),
            ordering=_get(kv, "sampler.ordering", str, "as-given"),
            move_every_step=_get(kv, "sampler.move_every_step", bool, False),
            lw=kernels.LiuWestConfig(a=_get(kv, "lw.a", float, 0.98)),
            rwm=kernels.RwmConfig(
                scale=_get(kv, "rwm.scale", float, 1.0),
                target_accept=_get(kv, "rwm.target_accept", float, 0.65),
            ),
            hmc=kernels.HmcConfig(
                eps=_get(kv, "hmc.eps", float, 0.1),
                steps=_get(kv, "hmc.steps", int, 10),
            ),
            sghmc=kernels.SghmcConfig(
                eps=_get(kv, "sghmc.eps", float, 0.01),
                steps=_get(kv, "sghmc.steps", int, 10),
                minibatch=_get(kv, "sghmc.minibatch", int, 32),
                friction=_get(kv, "sghmc.friction", float, 0.0),
                auto_friction=_get(kv, "sghmc.auto_friction", bool, True),
            ),
            hybrid=kernels.HybridConfig(
                threshold=_get(kv, "hybrid.threshold", float, 0.01),
                ewma=_get(kv, "hybrid.ewma", float, 0.2),
            ),
            ecs=smc.EcsKernelConfig(
                m=_get(kv, "ecs.m", int, 50),
                blocks=_get(kv, "ecs.blocks", int, 3),
            ),
        )
        heuristic = design.HeuristicConfig(
            kind=_get(kv, "heuristic.kind", str, "fixed-grid"),
            increment=_get(kv, "heuristic.increment", float, 0.08),
            t_min=_get(kv, "heuristic.t_min", float, 0.0),
            base=_get(kv, "heuristic.base", float, 1.0),
            exp_base=_get(kv, "heuristic.exp_base", float, 9.0 / 8.0),
            c1=_get(kv, "heuristic.c1", float, 10.0),
            c2=_get(kv, "heuristic.c2", float, 5.0),
            t_max=_get(kv, "heuristic.t_max", float, None),
            candidates=_get(kv, "heuristic.candidates", int, 20),
            candidate_spread=_get(kv, "heuristic.candidate_spread", float, 0.3),
            occupation_bins=_get(kv, "heuristic.occupation_bins", int, 20),
        )
        truth_raw = kv.pop("truth", None)
        cfg = cls(
            model_kind=model_kind,
            dim=dim,
            lower=lower,
            upper=upper,
            hyper_a=_get(kv, "model.a", float, None),
            hyper_b=_get(kv, "model.b", float, None),
            truth=_floats(truth_raw) if truth_raw is not None else None,
            dataset_path=kv.pop("dataset", None),
            sampler_kind=_get(kv, "sampler.kind", str, "sir"),
            sir=sir,
            mcmc_steps=_get(kv, "sampler.steps", int, 30),
            tle_stages=_get(kv, "tle.stages", int, 10),
            grf=kernels.GrfConfig(samples=_get(kv, "grf.samples", int, 1000)),
            ecs_warmup_fraction=_get(kv, "ecs.warmup_fraction", float, 0.4),
            heuristic=heuristic,
            adaptive=_get(kv, "adaptive", bool, False),
            experiments=_get(kv, "experiments", int, 100),
            shots=_get(kv, "shots", int, 1),
            ipe_m_cap=_get(kv, "ipe.m_cap", int, 10**6),
            runs=_get(kv, "runs", int, 1),
            seed=_get(kv, "seed", int, 0),
            out=kv.pop("out", None),
            workers=_get(kv, "workers", int, 1),
            save_traces=_get(kv, "save_traces", bool, False),
        )
        if kv:
            raise ConfigError("unknown config key", key=sorted(kv)[0])
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(parse_config_text(Path(path).read_text()))

    def build_spec(self) -> models.ModelSpec:
        hyper = ()
        if self.model_kind == "hahn-echo-ab":
            if self.hyper_a is None or self.hyper_b is None:
                raise ConfigError("hahn-echo-ab needs model.a and model.b", key="model.a")
            hyper = (self.hyper_a, self.hyper_b)
        try:
            return models.ModelSpec(self.model_kind, self.dim,
                                    self.lower, self.upper, hyper)
        except ValueError as exc:
            raise ConfigError(str(exc), key="model.kind") from exc


# ---------------------------------------------------------------------------
# Dataset I/O


def ingest_dataset(path) -> models.Dataset:
    """Read a `t,m,theta_ctl,outcome` CSV; empty fields take defaults."""
    t, m, x, o = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "m", "theta_ctl", "outcome"]:
            raise QBayesError(f"{path}: expected header t,m,theta_ctl,outcome")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != 4:
                raise QBayesError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                t.append(float(row[0]) if row[0].strip() else 0.0)
                m.append(int(row[1]) if row[1].strip() else 1)
                x.append(float(row[2]) if row[2].strip() else 0.0)
                outc = int(row[3])
            except ValueError as exc:
                raise QBayesError(f"{path}:{lineno}: malformed value ({exc})") from exc
            if outc not in (0, 1):
                raise QBayesError(f"{path}:{lineno}: outcome must be 0 or 1, got {outc}")
            o.append(outc)
    return models.Dataset(np.array(t), np.array(m, dtype=np.int64),
                          np.array(x), np.array(o, dtype=np.int64))


def write_dataset(ds: models.Dataset, path, kind: str = "precession"):
    """Write the dataset CSV, leaving the unused control columns empty."""
    ipe = kind == "ipe"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "m", "theta_ctl", "outcome"])
        for i in range(len(ds)):
            if ipe:
                w.writerow(["", int(ds.m[i]), repr(float(ds.theta_ctl[i])), int(ds.outcomes[i])])
            else:
                w.writerow([repr(float(ds.t[i])), "", "", int(ds.outcomes[i])])


# ---------------------------------------------------------------------------
# Single runs


@dataclass
class RunResult:
    mean: Optional[list] = None
    std: Optional[list] = None
    evidence_log: Optional[float] = None
    success: Optional[bool] = None
    coverage: Optional[float] = None
    mode_std: Optional[float] = None
    scaling_alpha: Optional[float] = None
    error: Optional[str] = None
    trace: Optional[smc.RunTrace] = None
    dataset: Optional[models.Dataset] = None


def _offline_controls(cfg: ExperimentConfig, rng_design) -> list:
    out = []
    k = 0
    for _ in range(cfg.experiments):
        k += 1
        t = design.schedule_times(cfg.heuristic.kind, k, cfg.heuristic, rng_design)
        for _ in range(cfg.shots):
            out.append(models.Controls(t=t))
    return out


def _offline_dataset(cfg, spec, rng_device, rng_design) -> models.Dataset:
    if cfg.dataset_path is not None:
        return ingest_dataset(cfg.dataset_path)
    controls = _offline_controls(cfg, rng_design)
    return models.simulate_dataset(spec, np.array(cfg.truth), controls, rng_device)


def _adaptive_sir(cfg, spec, seeds) -> RunResult:
    rng_device, rng_sampler, rng_design = (np.random.default_rng(s) for s in seeds.spawn(3))
    sampler = smc.SirSampler(spec, cfg.sir, rng_sampler)
    rows = []
    for k in range(1, cfg.experiments + 1):
        e = sampler.ensemble()
        w = e.weights
        ess_v = float(1.0 / np.sum(w * w))
        if spec.kind == "ipe":
            mom = sampler.moments()
            m_ctl, x_ctl = design.ipe_controls(mom, rng_design, cfg.ipe_m_cap)
            ctl = models.Controls(m=m_ctl, theta_ctl=x_ctl)
        else:
            t = design.next_control_time(e, ess_v, k, spec, cfg.heuristic, rng_design)
            ctl = models.Controls(t=t)
        datum = models.simulate_outcome(spec, np.array(cfg.truth), ctl, rng_device)
        rows.append(datum)
        sampler.update(datum)
    return _finish_particle_run(cfg, spec, sampler.ensemble(), sampler.trace(),
                                models.Dataset.from_data(rows))


def _adaptive_grf(cfg, spec, seeds) -> RunResult:
    rng_device, rng_sampler, rng_design = (np.random.default_rng(s) for s in seeds.spawn(3))
    lo, hi = spec.lower, spec.upper
    mean = (lo + hi) / 2.0
    cov = np.diag(((hi - lo) ** 2) / 12.0)
    mom = ens.Moments(mean, cov, np.sqrt(np.diag(cov)))
    tb = smc._TraceBuilder(spec.dim)
    rows = []
    for k in range(1, cfg.experiments + 1):
        if spec.kind == "ipe":
            m_ctl, x_ctl = design.ipe_controls(mom, rng_design, cfg.ipe_m_cap)
            ctl = models.Controls(m=m_ctl, theta_ctl=x_ctl)
            control_val = float(m_ctl)
        else:
            t = design.sigma_inverse_time(mom, cfg.heuristic)
            ctl = models.Controls(t=t)
            control_val = t
        datum = models.simulate_outcome(spec, np.array(cfg.truth), ctl, rng_device)
        rows.append(datum)
        res = kernels.grf_update(mom, spec, datum, cfg.grf, rng_sampler)
        mom = res.moments
        tb.add(k, float(res.n_accepted), False, 0.0, mom.mean, mom.std,
               np.nan, control_val, "grf")
    trace = tb.build()
    return RunResult(mean=list(mom.mean), std=list(mom.std), evidence_log=None,
                     trace=trace, dataset=models.Dataset.from_data(rows))


def _finish_particle_run(cfg, spec, e, trace, dataset) -> RunResult:
    mom = ens.moments(e)
    res = RunResult(mean=list(mom.mean), std=list(mom.std),
                    evidence_log=smc.log_evidence(trace), trace=trace,
                    dataset=dataset)
    if spec.kind == "multi-cosine" and cfg.truth is not None:
        mm = ens.mode_metrics(e, models.mode_set(spec, np.array(cfg.truth)))
        res.success = bool(mm.success)
        res.coverage = float(mm.coverage_fraction)
        res.mode_std = float(mm.overall_std)
    return res


def _tle_with_optional_warmup(cfg, spec, dataset, rng_sampler):
    schedule = smc.TemperSchedule.even(cfg.tle_stages)
    cv = None
    initial = None
    if cfg.sir.kernel == "ecs":
        frac = cfg.ecs_warmup_fraction
        n_warm = max(1, int(round(frac * len(dataset))))
        warm_idx = np.argsort(dataset.t, kind="stable")[:n_warm]
        warm_cfg = replace(cfg.sir, kernel="rwm")
        warm_ens, _ = smc.sir_run(spec, dataset.subset(warm_idx), warm_cfg, rng_sampler)
        theta_star = ens.moments(warm_ens).mean
        cv = subs.build_control_variates(spec, dataset, theta_star)
        initial = warm_ens.particles
    return smc.tle_run(spec, dataset, schedule, cfg.sir, rng_sampler, cv=cv,
                       initial_particles=initial)


def _single_run(cfg: ExperimentConfig, seeds) -> RunResult:
    spec = cfg.build_spec()
    try:
        if cfg.adaptive:
            if cfg.sampler_kind == "grf":
                return _adaptive_grf(cfg, spec, seeds)
            return _adaptive_sir(cfg, spec, seeds)
        rng_device, rng_sampler, rng_design = (np.random.default_rng(s) for s in seeds.spawn(3))
        dataset = _offline_dataset(cfg, spec, rng_device, rng_design)
        if cfg.sampler_kind == "sir":
            e, trace = smc.sir_run(spec, dataset, cfg.sir, rng_sampler)
        elif cfg.sampler_kind == "tle":
            dataset = smc.order_dataset(dataset, cfg.sir.ordering, rng_sampler)
            e, trace = _tle_with_optional_warmup(cfg, spec, dataset, rng_sampler)
        elif cfg.sampler_kind == "mcmc":
            e, trace = smc.mcmc_ensemble_run(spec, dataset, cfg.sir, cfg.mcmc_steps,
                                             rng_sampler)
        else:
            raise ConfigError("grf runs must be adaptive", key="sampler.kind")
        return _finish_particle_run(cfg, spec, e, trace, dataset)
    except DegenerateEnsembleError as exc:
        return RunResult(error=f"degenerate: {exc}")


# ---------------------------------------------------------------------------
# Batched experiment


@dataclass
class RunReport:
    """Batch outcome: per-run summaries plus per-iteration aggregates."""

    config: ExperimentConfig
    per_run: list
    agg_iters: np.ndarray
    agg_std_median: np.ndarray
    agg_std_q25: np.ndarray
    agg_std_q75: np.ndarray
    traces: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.per_run if r.error is not None)

    def final_stds(self) -> np.ndarray:
        return np.array([math.sqrt(sum(s * s for s in r.std))
                         for r in self.per_run if r.error is None])

    def median_final_std(self) -> float:
        return float(np.median(self.final_stds()))

    def success_rate(self) -> Optional[float]:
        flags = [r.success for r in self.per_run if r.error is None and r.success is not None]
        return float(np.mean(flags)) if flags else None


def _run_worker(args):
    cfg, seed_entropy = args
    return _single_run(cfg, np.random.SeedSequence(seed_entropy))


def run_experiment(cfg: ExperimentConfig, keep_traces: bool = True) -> RunReport:
    """Execute the configured batch of independent seeded runs.

    Run i is seeded by SeedSequence((cfg.seed, i)), so results do not
    depend on the worker count or on execution order.
    """
    jobs = [(cfg, (cfg.seed, i)) for i in range(cfg.runs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_worker, jobs))
    else:
        results = [_run_worker(j) for j in jobs]

    traces = [r.trace for r in results if r.error is None and r.trace is not None]
    if traces:
        n_iter = min(len(t) for t in traces)
        total_std = np.vstack([
            np.sqrt((t.stds[:n_iter] ** 2).sum(axis=1)) for t in traces
        ])
        agg_iters = traces[0].iters[:n_iter]
        med = np.median(total_std, axis=0)
        q25 = np.quantile(total_std, 0.25, axis=0)
        q75 = np.quantile(total_std, 0.75, axis=0)
    else:
        agg_iters = np.empty(0, dtype=np.int64)
        med = q25 = q75 = np.empty(0)

    report = RunReport(cfg, results, agg_iters, med, q25, q75,
                       traces=traces if keep_traces else [])
    return report


def scaling_fit(sigma, cumulative_time):
    """Least-squares slope of log sigma against log cumulative time.

    Returns (alpha, ci_halfwidth) with a 95 percent normal-theory
    confidence interval on the slope.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    cpt = np.asarray(cumulative_time, dtype=np.float64)
    if sigma.size != cpt.size or sigma.size < 5:
        raise FitError("need at least 5 paired points")
    if np.any(sigma <= 0) or np.any(cpt <= 0):
        raise FitError("scaling fit needs positive values")
    x = np.log(cpt)
    y = np.log(sigma)
    xc = x - x.mean()
    sxx = float(np.sum(xc * xc))
    if sxx == 0:
        raise FitError("degenerate abscissa")
    alpha = float(np.sum(xc * y) / sxx)
    resid = y - (y.mean() + alpha * xc)
    dof = max(sigma.size - 2, 1)
    se = math.sqrt(float(np.sum(resid**2)) / dof / sxx)
    return alpha, 1.96 * se


def fit_report_scaling(report: RunReport) -> np.ndarray:
    """Per-run scaling exponents of std versus cumulative evolution time."""
    alphas = []
    for t in report.traces:
        cpt = np.cumsum(t.control)
        std = np.sqrt((t.stds**2).sum(axis=1))
        ok = (cpt > 0) & (std > 0)
        if ok.sum() >= 5:
            alpha, _ = scaling_fit(std[ok], cpt[ok])
            alphas.append(alpha)
    return np.array(alphas)


# ---------------------------------------------------------------------------
# Emission


def report_emit(report: RunReport, outdir, fmt: str = "csv"):
    """Write aggregate trace CSV, per-run JSON lines, and a text summary."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    agg_path = outdir / "trace_agg.csv"
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "std_q25", "std_median", "std_q75"])
        for i in range(len(report.agg_iters)):
            w.writerow([int(report.agg_iters[i]),
                        f"{report.agg_std_q25[i]:.12g}",
                        f"{report.agg_std_median[i]:.12g}",
                        f"{report.agg_std_q75[i]:.12g}"])

    runs_path = outdir / "runs.jsonl"
    with open(runs_path, "w") as fh:
        for i, r in enumerate(report.per_run):
            fh.write(json.dumps({
                "run": i,
                "mean": r.mean,
                "std": r.std,
                "evidence_log": r.evidence_log,
                "success": r.success,
                "coverage": r.coverage,
                "mode_std": r.mode_std,
                "error": r.error,
            }) + "\n")

    ok = [r for r in report.per_run if r.error is None]
    lines = [f"runs: {len(report.per_run)} ({report.n_failed} failed)"]
    if ok:
        means = np.array([r.mean for r in ok])
        stds = np.array([r.std for r in ok])
        for d in range(means.shape[1]):
            lines.append(
                f"theta_{d} = {float(np.median(means[:, d])):.6g} "
                f"+/- {float(np.median(stds[:, d])):.6g}"
            )
        sr = report.success_rate()
        if sr is not None:
            lines.append(f"success_rate = {sr:.3g}")
        evs = [r.evidence_log for r in ok if r.evidence_log is not None]
        if evs:
            lines.append(f"log_evidence_median = {float(np.median(evs)):.6g}")
    (outdir / "summary.txt").write_text("\n".join(lines) + "\n")

    if report.config.save_traces:
        for i, t in enumerate(report.traces):
            t.to_csv(outdir / f"trace_run_{i}.csv")
    return {"trace_agg": agg_path, "runs": runs_path, "summary": outdir / "summary.txt"}


def load_runs_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
