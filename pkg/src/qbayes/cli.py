"""Command-line runner.

Subcommands:

- ``simulate``: emit a dataset CSV from a ground-truth config.
- ``infer``: run the configured batch and write reports.
- ``sweep``: repeat ``infer`` over a grid of values for one config key.
- ``report``: re-aggregate stored per-run traces.

Exit codes: 0 success, 2 config error, 3 every run degenerate.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness, models, smc
from .errors import ConfigError, QBayesError


def _load_config(args) -> harness.ExperimentConfig:
    kv = harness.parse_config_text(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        kv["seed"] = str(args.seed)
    if getattr(args, "runs", None) is not None:
        kv["runs"] = str(args.runs)
    if getattr(args, "out", None) is not None:
        kv["out"] = args.out
    if getattr(args, "workers", None) is not None:
        kv["workers"] = str(args.workers)
    return harness.ExperimentConfig.from_dict(kv)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if cfg.truth is None:
        raise ConfigError("simulate needs ground truth", key="truth")
    spec = cfg.build_spec()
    seeds = np.random.SeedSequence((cfg.seed, 0))
    rng_device, _, rng_design = (np.random.default_rng(s) for s in seeds.spawn(3))
    controls = harness._offline_controls(cfg, rng_design)
    ds = models.simulate_dataset(spec, np.array(cfg.truth), controls, rng_device)
    out = args.out or (cfg.out and str(Path(cfg.out) / "dataset.csv")) or "dataset.csv"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    harness.write_dataset(ds, out, spec.kind)
    print(f"wrote {len(ds)} rows to {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    report = harness.run_experiment(cfg)
    outdir = cfg.out or "out"
    paths = harness.report_emit(report, outdir)
    print(Path(paths["summary"]).read_text(), end="")
    if report.n_failed == len(report.per_run):
        return 3
    return 0


def cmd_sweep(args) -> int:
    base = harness.parse_config_text(Path(args.config).read_text())
    values = args.values.split(",")
    outdir = Path(args.out or base.get("out", "sweep_out"))
    any_ok = False
    for v in values:
        kv = dict(base)
        kv[args.key] = v
        kv["out"] = str(outdir / f"{args.key.replace('.', '_')}_{v}")
        cfg = harness.ExperimentConfig.from_dict(kv)
        report = harness.run_experiment(cfg)
        harness.report_emit(report, kv["out"])
        ok = report.n_failed < len(report.per_run)
        any_ok |= ok
        med = report.median_final_std() if ok else float("nan")
        print(f"{args.key}={v}: median final std {med:.6g}"
              + ("" if ok else " (all runs failed)"))
    return 0 if any_ok else 3


def cmd_report(args) -> int:
    rundir = Path(args.runs_dir)
    traces = sorted(rundir.glob("trace_run_*.csv"))
    if not traces:
        raise QBayesError(f"no stored traces under {rundir}")
    stds = []
    iters = None
    for path in traces:
        raw = np.genfromtxt(path, delimiter=",", names=True)
        raw = np.atleast_1d(raw)
        cols = [n for n in raw.dtype.names if n.startswith("std_")]
        tot = np.sqrt(sum(raw[c] ** 2 for c in cols))
        stds.append(tot)
        iters = raw["iter"]
    n = min(len(s) for s in stds)
    stack = np.vstack([s[:n] for s in stds])
    out = rundir / "trace_agg.csv"
    with open(out, "w") as fh:
        fh.write("iter,std_q25,std_median,std_q75\n")
        for i in range(n):
            fh.write(f"{int(iters[i])},{np.quantile(stack[:, i], 0.25):.12g},"
                     f"{np.median(stack[:, i]):.12g},{np.quantile(stack[:, i], 0.75):.12g}\n")
    print(f"re-aggregated {len(stds)} traces into {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qbayes",
                                     description="Bayesian qubit characterization runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="emit a dataset CSV from ground truth")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--out")
    p_sim.set_defaults(func=cmd_simulate)

    p_inf = sub.add_parser("infer", help="run inference from a config")
    p_inf.add_argument("--config", required=True)
    p_inf.add_argument("--seed", type=int)
    p_inf.add_argument("--runs", type=int)
    p_inf.add_argument("--out")
    p_inf.add_argument("--workers", type=int)
    p_inf.set_defaults(func=cmd_infer)

    p_sw = sub.add_parser("sweep", help="grid over one config key")
    p_sw.add_argument("--config", required=True)
    p_sw.add_argument("--key", required=True)
    p_sw.add_argument("--values", required=True, help="comma-separated values")
    p_sw.add_argument("--out")
    p_sw.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser("report", help="re-aggregate stored runs")
    p_rep.add_argument("--runs-dir", required=True)
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QBayesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
