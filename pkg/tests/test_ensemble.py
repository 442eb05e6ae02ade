"""Weighted-ensemble statistics: reweighting, ESS, resampling, metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from qbayes import ensemble as ens, models
from qbayes.errors import DegenerateEnsembleError, QBayesError
from qbayes.models import Controls, Datum


def cloud(particles, weights=None, lower=0.0, upper=1.0):
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if particles.shape[0] == 1 and particles.shape[1] > 1:
        particles = particles.T
    n, dim = particles.shape
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    return ens.WeightedEnsemble(particles, w, np.full(dim, lower), np.full(dim, upper))


class TestReweight:
    def test_constant_likelihood_keeps_weights(self):
        # t = 0 makes every particle's likelihood exactly 1.
        spec = models.t1_decay()
        e = cloud([10.0, 20.0, 30.0], [0.2, 0.3, 0.5], lower=1e-3, upper=100.0)
        out, c = ens.reweight(e, spec, Datum(Controls(t=0.0), 1))
        assert_allclose(out.weights, [0.2, 0.3, 0.5], atol=1e-15)
        assert c == pytest.approx(1.0)

    def test_indicator_likelihood(self):
        # precession at omega*t = pi/2 gives L(1)=1; omega=0 gives L(1)=0.
        spec = models.precession(1.0)
        e = cloud([0.5, 0.0], [0.5, 0.5])
        out, c = ens.reweight(e, spec, Datum(Controls(t=np.pi), 1))
        assert_allclose(out.weights, [1.0, 0.0], atol=1e-15)
        assert c == pytest.approx(0.5)

    def test_power_composition(self):
        spec = models.precession(1.0)
        rng = np.random.default_rng(5)
        e = cloud(rng.uniform(0.05, 0.95, 50))
        d = Datum(Controls(t=2.0), 1)
        full, _ = ens.reweight(e, spec, d, power=1.0)
        half, _ = ens.reweight(e, spec, d, power=0.5)
        twice, _ = ens.reweight(half, spec, d, power=0.5)
        assert_allclose(twice.weights, full.weights, atol=1e-12)

    def test_degenerate_raises(self):
        spec = models.precession(1.0)
        e = cloud([0.5], lower=0.0, upper=1.0)
        with pytest.raises(DegenerateEnsembleError):
            ens.reweight(e, spec, Datum(Controls(t=np.pi), 0))

    @given(st.integers(min_value=1, max_value=6))
    @settings(max_examples=20, deadline=None)
    def test_power_additivity_property(self, seed):
        rng = np.random.default_rng(seed)
        spec = models.precession(1.0)
        e = cloud(rng.uniform(0.05, 0.95, 30))
        d = Datum(Controls(t=float(rng.uniform(0.5, 3.0))), 1)
        p = float(rng.uniform(0.1, 0.5))
        q = float(rng.uniform(0.1, 0.5))
        via_two, _ = ens.reweight(*[e, spec, d], power=p)
        via_two, _ = ens.reweight(via_two, spec, d, power=q)
        direct, _ = ens.reweight(e, spec, d, power=p + q)
        assert_allclose(via_two.weights, direct.weights, atol=1e-12)


class TestEss:
    def test_uniform(self):
        assert ens.ess(cloud([1, 2, 3, 4.0])) == pytest.approx(4.0)

    def test_collapsed(self):
        assert ens.ess(cloud([1, 2, 3.0], [1.0, 0.0, 0.0])) == pytest.approx(1.0)

    def test_frozen_value(self):
        # 1 / (0.25 + 0.09 + 0.04) computed in extended precision.
        got = ens.ess(cloud([1, 2, 3.0], [0.5, 0.3, 0.2]))
        assert got == pytest.approx(float(1 / np.float128(0.38)), rel=1e-12)
        assert got == pytest.approx(2.6315789473684212, rel=1e-12)

    def test_unnormalized_rejected(self):
        with pytest.raises(QBayesError):
            ens.ess(cloud([1, 2.0], [0.5, 0.6]))

    @given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=1, max_size=64))
    @settings(max_examples=50, deadline=None)
    def test_bounds_property(self, raw):
        w = np.array(raw)
        w = w / w.sum()
        e = cloud(np.arange(len(w), dtype=float), w, upper=float(len(w)))
        v = ens.ess(e)
        assert 1.0 - 1e-9 <= v <= len(w) + 1e-9


class TestResample:
    def test_all_mass_on_one(self, rng):
        e = cloud([5.0, 6.0, 7.0], [1.0, 0.0, 0.0], upper=10.0)
        out = ens.multinomial_resample(e, rng)
        assert np.all(out.particles == 5.0)
        assert_allclose(out.weights, 1.0 / 3.0)

    def test_single_particle(self, rng):
        e = cloud([2.5], upper=10.0)
        out = ens.multinomial_resample(e, rng)
        assert out.particles[0, 0] == 2.5
        assert out.weights[0] == 1.0

    def test_binomial_concentration(self):
        rng = np.random.default_rng(17)
        e = cloud([0.0, 1.0], [0.7, 0.3])
        n_total = 10**5  # resamples of a 2-particle cloud: 2e5 draws total
        count0 = 0
        draws = 0
        for _ in range(n_total // e.n):
            out = ens.multinomial_resample(e, rng)
            count0 += int(np.sum(out.particles[:, 0] == 0.0))
            draws += e.n
        se = np.sqrt(draws * 0.7 * 0.3)
        assert abs(count0 - 0.7 * draws) <= 3 * se

    def test_mean_preserved_in_expectation(self):
        rng = np.random.default_rng(23)
        pts = rng.uniform(0, 1, 200)
        w = rng.random(200)
        w /= w.sum()
        e = cloud(pts, w)
        target = float(w @ pts)
        means = []
        for _ in range(1000):
            out = ens.multinomial_resample(e, rng)
            means.append(out.particles.mean())
        grand = np.mean(means)
        se = np.std(means, ddof=1) / np.sqrt(len(means))
        assert abs(grand - target) <= 4 * se


class TestMoments:
    def test_two_point(self):
        mom = ens.moments(cloud([1.0, 3.0], upper=5.0))
        assert mom.mean[0] == pytest.approx(2.0)
        assert mom.cov[0, 0] == pytest.approx(1.0)

    def test_identical_particles(self):
        mom = ens.moments(cloud([2.0, 2.0, 2.0], upper=5.0))
        assert mom.cov[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_monte_carlo_unit_normal(self):
        rng = np.random.default_rng(31)
        pts = rng.standard_normal(10**6)
        e = ens.WeightedEnsemble(pts[:, None], np.full(10**6, 1e-6))
        mom = ens.moments(e)
        assert abs(mom.mean[0]) < 0.005
        assert abs(mom.cov[0, 0] - 1.0) < 0.01

    def test_covariance_symmetric(self, rng):
        pts = rng.standard_normal((500, 3))
        e = ens.WeightedEnsemble(pts, np.full(500, 1 / 500))
        mom = ens.moments(e)
        assert_allclose(mom.cov, mom.cov.T, atol=0)
        assert np.all(np.diag(mom.cov) >= 0)


class TestOccupation:
    def test_single_cell(self):
        e = cloud([0.51, 0.52, 0.53])
        assert ens.occupation_rate(e, 10) == pytest.approx(0.1)

    def test_full_cover(self):
        e = cloud((np.arange(10) + 0.5) / 10.0)
        assert ens.occupation_rate(e, 10) == 1.0

    def test_uniform_coupon_collector(self):
        rng = np.random.default_rng(41)
        e = cloud(rng.uniform(0, 1, 10**4))
        # P(any of 10 bins empty) <= 10 * 0.9^10000, far below 1e-4
        assert ens.occupation_rate(e, 10) == 1.0

    def test_monotone_under_adding_particles(self, rng):
        base = rng.uniform(0, 1, (50, 2))
        extra = rng.uniform(0, 1, (50, 2))
        lo, hi = np.zeros(2), np.ones(2)
        e1 = ens.WeightedEnsemble(base, np.full(50, 1 / 50), lo, hi)
        e2 = ens.WeightedEnsemble(np.vstack([base, extra]), np.full(100, 1 / 100), lo, hi)
        assert ens.occupation_rate(e2, 8) >= ens.occupation_rate(e1, 8)


class TestModeMetrics:
    modes = np.array([[0.3, 0.7], [0.7, 0.3]])

    def test_particles_exactly_on_modes(self):
        pts = np.repeat(self.modes, 10, axis=0)
        e = ens.WeightedEnsemble(pts, np.full(20, 1 / 20), np.zeros(2), np.ones(2))
        mm = ens.mode_metrics(e, self.modes)
        assert mm.avg_dist == 0.0
        assert mm.success

    def test_single_mode_coverage_fails(self):
        pts = np.tile(self.modes[0], (20, 1))
        e = ens.WeightedEnsemble(pts, np.full(20, 1 / 20), np.zeros(2), np.ones(2))
        mm = ens.mode_metrics(e, self.modes)
        assert not mm.checks["coverage"]
        assert not mm.success

    def test_gaussian_blobs(self):
        rng = np.random.default_rng(57)
        half = 2000
        pts = np.vstack([
            self.modes[0] + 0.01 * rng.standard_normal((half, 2)),
            self.modes[1] + 0.01 * rng.standard_normal((half, 2)),
        ])
        e = ens.WeightedEnsemble(pts, np.full(2 * half, 1 / (2 * half)),
                                 np.zeros(2), np.ones(2))
        mm = ens.mode_metrics(e, self.modes)
        assert mm.overall_std == pytest.approx(0.01 * np.sqrt(2), rel=0.05)
        assert mm.success
        assert mm.coverage_fraction == 1.0


class TestSnapshotCsv:
    def test_round_trip(self, rng, tmp_path):
        pts = rng.uniform(0, 1, (20, 3))
        w = rng.random(20)
        w /= w.sum()
        e = ens.WeightedEnsemble(pts, w)
        path = tmp_path / "snap.csv"
        ens.save_csv(e, path)
        back = ens.load_csv(path)
        assert_allclose(back.particles, pts, rtol=1e-15)
        assert_allclose(back.weights, w, rtol=1e-15)
        header = path.read_text().splitlines()[0]
        assert header == "w,theta_0,theta_1,theta_2"
