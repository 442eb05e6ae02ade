"""Harness: config parsing, dataset IO, batches, reports, determinism, CLI."""

import json
import re

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qbayes import cli, harness, models, smc
from qbayes.errors import ConfigError, FitError, QBayesError
from qbayes.harness import ExperimentConfig


BASE = {
    "model.kind": "precession",
    "model.upper": "1.0",
    "truth": "0.5",
    "sampler.kind": "sir",
    "sampler.particles": "100",
    "heuristic.kind": "fixed-grid",
    "heuristic.increment": "0.08",
    "experiments": "30",
    "runs": "2",
    "seed": "11",
}


def make_cfg(**overrides):
    kv = dict(BASE)
    kv.update({k: str(v) for k, v in overrides.items()})
    return ExperimentConfig.from_dict(kv)


class TestConfig:
    def test_parse_text(self):
        kv = harness.parse_config_text("a.b = 1\n# comment\nc=x # trailing\n\n")
        assert kv == {"a.b": "1", "c": "x"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as err:
            make_cfg(**{"sampler.bogus": "1"})
        assert "sampler.bogus" in str(err.value)

    def test_truth_xor_dataset(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({k: v for k, v in BASE.items() if k != "truth"})
        kv = dict(BASE)
        kv["dataset"] = "x.csv"
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(kv)

    def test_bad_value_carries_key(self):
        with pytest.raises(ConfigError) as err:
            make_cfg(**{"sampler.particles": "many"})
        assert err.value.key == "sampler.particles"

    def test_from_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("\n".join(f"{k}={v}" for k, v in BASE.items()))
        cfg = ExperimentConfig.from_file(path)
        assert cfg.sir.n_particles == 100
        assert cfg.heuristic.increment == 0.08


class TestDatasetIo:
    def test_empty_file_with_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("t,m,theta_ctl,outcome\n")
        ds = harness.ingest_dataset(p)
        assert len(ds) == 0

    def test_schema_example_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("t,m,theta_ctl,outcome\n0.08,,,1\n")
        ds = harness.ingest_dataset(p)
        assert ds.t[0] == 0.08
        assert ds.outcomes[0] == 1
        assert ds.m[0] == 1

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("t,m,theta_ctl,outcome\n0.1,,,1\nbroken,,,x\n")
        with pytest.raises(QBayesError) as err:
            harness.ingest_dataset(p)
        assert ":3:" in str(err.value)

    def test_nonbinary_outcome_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("t,m,theta_ctl,outcome\n0.1,,,2\n")
        with pytest.raises(QBayesError) as err:
            harness.ingest_dataset(p)
        assert "outcome" in str(err.value)

    def test_round_trip_multiset(self, tmp_path, rng):
        spec = models.precession(1.0)
        times = rng.uniform(0, 10, 10_000)
        ds = models.simulate_dataset(spec, [0.5],
                                     [models.Controls(t=float(t)) for t in times], rng)
        p = tmp_path / "big.csv"
        harness.write_dataset(ds, p, "precession")
        back = harness.ingest_dataset(p)
        assert len(back) == len(ds)
        assert sorted(zip(back.t, back.outcomes)) == sorted(zip(ds.t, ds.outcomes))

    def test_ipe_round_trip(self, tmp_path, rng):
        spec = models.ipe_phase()
        ctl = [models.Controls(m=int(m), theta_ctl=float(x))
               for m, x in zip(rng.integers(1, 20, 100), rng.uniform(0, 6.28, 100))]
        ds = models.simulate_dataset(spec, [0.5], ctl, rng)
        p = tmp_path / "ipe.csv"
        harness.write_dataset(ds, p, "ipe")
        back = harness.ingest_dataset(p)
        assert np.array_equal(back.m, ds.m)
        assert_allclose(back.theta_ctl, ds.theta_ctl, rtol=1e-15)


class TestRunExperiment:
    def test_deterministic_report(self):
        cfg = make_cfg(runs=3)
        r1 = harness.run_experiment(cfg)
        r2 = harness.run_experiment(cfg)
        for a, b in zip(r1.per_run, r2.per_run):
            assert a.mean == b.mean
            assert a.std == b.std
            assert a.evidence_log == b.evidence_log
        assert np.array_equal(r1.agg_std_median, r2.agg_std_median)

    def test_worker_count_invariant(self):
        cfg1 = make_cfg(runs=4, workers=1)
        cfg2 = make_cfg(runs=4, workers=2)
        r1 = harness.run_experiment(cfg1)
        r2 = harness.run_experiment(cfg2)
        for a, b in zip(r1.per_run, r2.per_run):
            assert a.mean == b.mean

    def test_emit_identical_bytes(self, tmp_path):
        cfg = make_cfg(runs=2)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        harness.report_emit(harness.run_experiment(cfg), d1)
        harness.report_emit(harness.run_experiment(cfg), d2)
        for name in ("trace_agg.csv", "runs.jsonl", "summary.txt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_degenerate_runs_recorded_not_fatal(self, tmp_path):
        # an impossible dataset degrades every run without raising
        p = tmp_path / "bad.csv"
        p.write_text("t,m,theta_ctl,outcome\n0.0,,,1\n0.0,,,0\n")
        kv = dict(BASE)
        del kv["truth"]
        kv.update({"dataset": str(p), "model.kind": "t1-decay",
                   "model.lower": "0.001", "model.upper": "100.0", "runs": "2"})
        cfg = ExperimentConfig.from_dict(kv)
        report = harness.run_experiment(cfg)
        assert report.n_failed == 2
        assert all(r.error is not None for r in report.per_run)

    def test_adaptive_replay_equivalence(self):
        # the control at step k never peeks ahead: replaying the recorded
        # dataset through the sampler stream reproduces the run exactly
        cfg = make_cfg(runs=1, **{"heuristic.kind": "sigma-inverse"})
        cfg = ExperimentConfig.from_dict({**BASE, "heuristic.kind": "sigma-inverse",
                                          "runs": "1", "adaptive": "true",
                                          "experiments": "25"})
        report = harness.run_experiment(cfg)
        run = report.per_run[0]
        assert run.error is None
        seeds = np.random.SeedSequence((cfg.seed, 0)).spawn(3)
        rng_sampler = np.random.default_rng(seeds[1])
        spec = cfg.build_spec()
        e, trace = smc.sir_run(spec, run.dataset, cfg.sir, rng_sampler)
        assert np.array_equal(trace.means, run.trace.means)
        assert np.array_equal(trace.stds, run.trace.stds)
        assert np.array_equal(trace.ess, run.trace.ess)

    def test_mode_metrics_attached_for_multicos(self):
        kv = {
            "model.kind": "multi-cosine", "model.dim": "2",
            "truth": "0.3,0.7", "sampler.particles": "225",
            "heuristic.kind": "random", "heuristic.t_max": "100",
            "experiments": "60", "runs": "1", "seed": "3",
        }
        cfg = ExperimentConfig.from_dict(kv)
        report = harness.run_experiment(cfg)
        r = report.per_run[0]
        assert r.error is None
        assert r.success is not None
        assert 0.0 <= r.coverage <= 1.0


class TestScalingFit:
    def test_exact_power_law(self):
        t = np.linspace(10, 1000, 50)
        alpha, ci = harness.scaling_fit(t**-0.75, t)
        assert alpha == pytest.approx(-0.75, abs=1e-9)
        assert ci < 1e-9

    def test_flat(self):
        t = np.linspace(10, 1000, 20)
        alpha, _ = harness.scaling_fit(np.full_like(t, 3.3), t)
        assert alpha == pytest.approx(0.0, abs=1e-12)

    def test_errors(self):
        with pytest.raises(FitError):
            harness.scaling_fit([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(FitError):
            harness.scaling_fit([1, -1, 1, 1, 1], [1, 2, 3, 4, 5])


class TestReportEmit:
    def test_single_run_quartiles_collapse(self, tmp_path):
        cfg = make_cfg(runs=1)
        report = harness.run_experiment(cfg)
        paths = harness.report_emit(report, tmp_path / "r")
        raw = np.genfromtxt(paths["trace_agg"], delimiter=",", names=True)
        assert_allclose(raw["std_q25"], raw["std_median"], rtol=0)
        assert_allclose(raw["std_q75"], raw["std_median"], rtol=0)

    def test_emit_parse_round_trip(self, tmp_path):
        cfg = make_cfg(runs=3)
        report = harness.run_experiment(cfg)
        paths = harness.report_emit(report, tmp_path / "r")
        rows = harness.load_runs_jsonl(paths["runs"])
        assert len(rows) == 3
        for i, r in enumerate(report.per_run):
            assert rows[i]["mean"] == pytest.approx(r.mean)
            assert rows[i]["evidence_log"] == pytest.approx(r.evidence_log)
        raw = np.genfromtxt(paths["trace_agg"], delimiter=",", names=True)
        assert_allclose(raw["std_median"], report.agg_std_median, rtol=1e-10)

    def test_summary_fields_consistent(self, tmp_path):
        cfg = make_cfg(runs=5)
        report = harness.run_experiment(cfg)
        paths = harness.report_emit(report, tmp_path / "r")
        text = (tmp_path / "r" / "summary.txt").read_text()
        m = re.search(r"theta_0 = (\S+) \+/- (\S+)", text)
        ok = [r for r in report.per_run if r.error is None]
        med_mean = float(np.median([r.mean[0] for r in ok]))
        med_std = float(np.median([r.std[0] for r in ok]))
        assert m.group(1) == f"{med_mean:.6g}"
        assert m.group(2) == f"{med_std:.6g}"


class TestCli:
    def _write_cfg(self, tmp_path, extra=None):
        kv = dict(BASE)
        kv["runs"] = "2"
        if extra:
            kv.update(extra)
        p = tmp_path / "exp.cfg"
        p.write_text("\n".join(f"{k}={v}" for k, v in kv.items()))
        return p

    def test_simulate_then_infer_from_dataset(self, tmp_path, capsys):
        cfgp = self._write_cfg(tmp_path)
        out_csv = tmp_path / "data.csv"
        assert cli.main(["simulate", "--config", str(cfgp), "--out", str(out_csv)]) == 0
        ds = harness.ingest_dataset(out_csv)
        assert len(ds) == 30
        kv = harness.parse_config_text(cfgp.read_text())
        del kv["truth"]
        kv["dataset"] = str(out_csv)
        cfg2 = tmp_path / "exp2.cfg"
        cfg2.write_text("\n".join(f"{k}={v}" for k, v in kv.items()))
        rc = cli.main(["infer", "--config", str(cfg2), "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "summary.txt").exists()
        assert (tmp_path / "out" / "runs.jsonl").exists()

    def test_config_error_exit_code(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("nonsense.key=1\ntruth=0.5\n")
        assert cli.main(["infer", "--config", str(p)]) == 2

    def test_all_degenerate_exit_code(self, tmp_path):
        data = tmp_path / "bad.csv"
        data.write_text("t,m,theta_ctl,outcome\n0.0,,,1\n0.0,,,0\n")
        kv = {"model.kind": "t1-decay", "model.lower": "0.001",
              "model.upper": "100.0", "dataset": str(data), "runs": "2",
              "sampler.particles": "30"}
        p = tmp_path / "exp.cfg"
        p.write_text("\n".join(f"{k}={v}" for k, v in kv.items()))
        assert cli.main(["infer", "--config", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_sweep(self, tmp_path, capsys):
        cfgp = self._write_cfg(tmp_path, {"runs": "1", "experiments": "10"})
        rc = cli.main(["sweep", "--config", str(cfgp), "--key", "sampler.particles",
                       "--values", "50,80", "--out", str(tmp_path / "sw")])
        assert rc == 0
        assert (tmp_path / "sw" / "sampler_particles_50" / "summary.txt").exists()
        assert (tmp_path / "sw" / "sampler_particles_80" / "summary.txt").exists()

    def test_report_reaggregates(self, tmp_path):
        cfgp = self._write_cfg(tmp_path, {"save_traces": "true", "runs": "2"})
        assert cli.main(["infer", "--config", str(cfgp),
                         "--out", str(tmp_path / "out")]) == 0
        agg = (tmp_path / "out" / "trace_agg.csv").read_bytes()
        assert cli.main(["report", "--runs-dir", str(tmp_path / "out")]) == 0
        agg2 = (tmp_path / "out" / "trace_agg.csv").read_text()
        raw_old = np.genfromtxt([l for l in agg.decode().splitlines()],
                                delimiter=",", names=True)
        raw_new = np.genfromtxt(agg2.splitlines(), delimiter=",", names=True)
        assert_allclose(raw_new["std_median"], raw_old["std_median"], rtol=1e-9)
