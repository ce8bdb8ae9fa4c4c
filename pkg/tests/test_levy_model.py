"""Model layer: mark distributions, exponent, sampling, rng streams."""

import math

import numpy as np
import pytest
import scipy.integrate
import scipy.stats
from hypothesis import given, settings, strategies as st

from levyrefract.levy_model import (
    EXACT,
    EventPath,
    Exponential,
    Grid,
    HyperExponential,
    InvalidParameter,
    JumpDiffusionSpec,
    PointMass,
    RngStream,
    Uniform,
    Weibull,
    characteristic_exponent,
    classify_case,
    net_drift,
    sample_path,
    validate_spec,
)
from conftest import REFERENCE_GAMMA, drift_only

# mass of Weibull(2,1) below 1, integral of x f(x) on [0,1), frozen from an
# independent quadrature
WEIBULL21_TRUNC_MEAN = 0.3789446916409847


class TestMarkDistributions:
    def test_uniform_truncated_mean_closed_form(self):
        # supported inside [0,1): plain mean
        assert Uniform(0.0, 1.0).truncated_mean() == pytest.approx(0.5, abs=1e-12)
        # straddles 1: integral of x/(b-a) on [a,1)
        d = Uniform(0.5, 1.5)
        assert d.truncated_mean() == pytest.approx((1 - 0.25) / 2.0, abs=1e-10)

    def test_weibull_truncated_mean_frozen(self):
        got = Weibull(2.0, 1.0).truncated_mean()
        assert got == pytest.approx(WEIBULL21_TRUNC_MEAN, abs=1e-12)

    def test_weibull_truncated_mean_vs_quadrature(self):
        d = Weibull(1.4, 0.8)
        ref, err = scipy.integrate.quad(
            lambda x: x * scipy.stats.weibull_min.pdf(x, 1.4, scale=0.8), 0, 1)
        assert err < 1e-7
        assert d.truncated_mean() == pytest.approx(ref, abs=1e-7)

    def test_exponential_truncated_mean_vs_quadrature(self):
        d = Exponential(1.7)
        ref, _ = scipy.integrate.quad(
            lambda x: x * 1.7 * math.exp(-1.7 * x), 0, 1)
        assert d.truncated_mean() == pytest.approx(ref, abs=1e-10)

    def test_pointmass_truncated_mean(self):
        assert PointMass(0.4).truncated_mean() == 0.4
        assert PointMass(1.0).truncated_mean() == 0.0
        assert PointMass(2.5).truncated_mean() == 0.0

    def test_hyperexponential_mixture_linearity(self):
        d = HyperExponential((0.3, 0.7), (1.0, 3.0))
        parts = 0.3 * Exponential(1.0).truncated_mean() \
            + 0.7 * Exponential(3.0).truncated_mean()
        assert d.truncated_mean() == pytest.approx(parts, abs=1e-10)

    def test_mean_values(self):
        assert Uniform(0.0, 1.0).mean() == pytest.approx(0.5)
        assert Weibull(2.0, 1.0).mean() == pytest.approx(
            math.gamma(1.5), abs=1e-10)
        assert Exponential(2.0).mean() == pytest.approx(0.5)

    def test_sampling_matches_distribution(self):
        rng = np.random.Generator(np.random.Philox(7))
        x = Weibull(2.0, 1.0).sample(20000, rng)
        stat = scipy.stats.kstest(x, scipy.stats.weibull_min(2.0, scale=1.0).cdf)
        assert stat.pvalue > 0.01
        u = Uniform(0.25, 0.75).sample(20000, rng)
        assert u.min() >= 0.25 and u.max() <= 0.75
        stat = scipy.stats.kstest(u, scipy.stats.uniform(0.25, 0.5).cdf)
        assert stat.pvalue > 0.01

    def test_hyperexponential_sampling_mean(self):
        rng = np.random.Generator(np.random.Philox(8))
        d = HyperExponential((0.5, 0.5), (1.0, 4.0))
        x = d.sample(40000, rng)
        want = 0.5 * 1.0 + 0.5 * 0.25
        assert x.mean() == pytest.approx(want, abs=4 * x.std() / 200)

    def test_pdf_normalizes_to_one_below_upper_quantile(self):
        for d in (Uniform(0.2, 1.1), Exponential(1.3), Weibull(1.8, 0.7),
                  HyperExponential((0.4, 0.6), (0.8, 2.5))):
            hi = d.quantile_hi()
            xs = np.linspace(0, hi, 200001)
            mids = 0.5 * (xs[1:] + xs[:-1])
            mass = float(np.sum(d.pdf_at(mids)) * (xs[1] - xs[0]))
            assert mass == pytest.approx(1.0, abs=1e-4)

    def test_invalid_parameters_name_the_field(self):
        with pytest.raises(InvalidParameter):
            Uniform(1.0, 0.5)
        with pytest.raises(InvalidParameter):
            Exponential(-1.0)
        with pytest.raises(InvalidParameter):
            Weibull(0.0, 1.0)


class TestCharacteristicExponent:
    def test_zero_frequency_is_zero(self, ref_spec_bv):
        assert characteristic_exponent(ref_spec_bv, 0.0) == 0

    def test_pure_drift(self):
        spec = drift_only(1.3)
        lam = np.array([0.5, -2.0])
        got = characteristic_exponent(spec, lam)
        np.testing.assert_allclose(got, -1j * 1.3 * lam, atol=1e-14)

    def test_gaussian_part_quadratic(self):
        spec = JumpDiffusionSpec(gamma=0.0, sigma=1.5)
        got = characteristic_exponent(spec, 2.0)
        assert got == pytest.approx(0.5 * 2.25 * 4.0)

    def test_uniform_jump_component_vs_quadrature(self):
        spec = JumpDiffusionSpec(
            gamma=0.3, sigma=0.0, jump_components=((1.7, 1, Uniform(0.0, 1.0)),))
        lam = 1.3

        def integrand(x):
            # compensated integrand for marks below 1
            return (1 - math.cos(lam * x)) + 1j * (-math.sin(lam * x) + lam * x)

        ref, _ = scipy.integrate.quad(lambda x: integrand(x).real, 0, 1)
        imf, _ = scipy.integrate.quad(lambda x: integrand(x).imag, 0, 1)
        want = -1j * 0.3 * lam + 1.7 * (ref + 1j * imf)
        got = complex(characteristic_exponent(spec, lam))
        assert got == pytest.approx(want, abs=1e-9)

    def test_negative_jumps_flip_imaginary_sign(self):
        up = JumpDiffusionSpec(gamma=0.0, jump_components=((1.0, 1, PointMass(0.4)),))
        dn = JumpDiffusionSpec(gamma=0.0, jump_components=((1.0, -1, PointMass(0.4)),))
        a = complex(characteristic_exponent(up, 0.7))
        b = complex(characteristic_exponent(dn, 0.7))
        assert a.real == pytest.approx(b.real, abs=1e-14)
        assert a.imag == pytest.approx(-b.imag, abs=1e-14)


class TestNetDriftAndCase:
    def test_reference_model_slope_between_jumps(self, ref_spec_bv):
        assert net_drift(ref_spec_bv) == pytest.approx(0.6, abs=1e-12)

    def test_gaussian_has_no_net_drift(self, ref_spec_gauss):
        assert net_drift(ref_spec_gauss) is None

    def test_classification_table(self, ref_spec_bv, ref_spec_gauss):
        # net drift 0.6 exceeds the 0.5 cap: sticky regime needs delta <= alpha
        assert classify_case(ref_spec_bv, 0.5).label == "Case1"
        assert classify_case(ref_spec_bv, 0.7).label == "Case2"
        assert classify_case(ref_spec_gauss, 0.5).label == "Case1"
        assert classify_case(drift_only(-1.0), 0.5).label == "Case1"
        assert classify_case(drift_only(1.0), math.inf).label == "Case2"

    def test_validate_spec_reports_negative_jump_mean(self, ref_spec_bv):
        rep = validate_spec(ref_spec_bv)
        assert rep.ok
        assert rep.negative_jump_mean == pytest.approx(math.gamma(1.5), abs=1e-9)


class TestEventPath:
    def path(self):
        return EventPath(x0=1.0, horizon=10.0, drift=0.5,
                         times=np.array([2.0, 5.0]), sizes=np.array([1.0, -2.5]))

    def test_values_and_left_limits(self):
        p = self.path()
        assert p.value_at(0.0) == 1.0
        assert p.value_at(2.0) == pytest.approx(1.0 + 1.0 + 1.0)
        assert p.left_limit_at(2.0) == pytest.approx(2.0)
        assert p.value_at(10.0) == pytest.approx(1 + 10.0 * 0.5 + 1.0 - 2.5)

    def test_total_variation(self):
        p = self.path()
        assert p.total_variation() == pytest.approx(0.5 * 10 + 1.0 + 2.5)

    def test_shift_moves_every_value(self):
        p = self.path()
        q = p.shifted(0.7)
        ts = np.linspace(0, 10, 23)
        np.testing.assert_allclose(q.value_at(ts), p.value_at(ts) + 0.7)

    def test_grid_restriction_agrees_with_values(self):
        p = self.path()
        g = p.to_grid(40)
        ts = np.arange(41) * p.horizon / 40
        assert g.values[0] == p.x0
        np.testing.assert_allclose(g.values, p.value_at(ts), atol=1e-12)

    def test_event_times_must_increase(self):
        with pytest.raises(InvalidParameter):
            EventPath(x0=0.0, horizon=1.0, drift=0.0,
                      times=np.array([0.5, 0.5]), sizes=np.array([1.0, 1.0]))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-2, 2), st.floats(-1.5, 1.5),
           st.lists(st.tuples(st.floats(0.01, 9.9), st.floats(-2, 2)),
                    max_size=6))
    def test_value_formula(self, x0, drift, jumps):
        jumps = sorted({t: s for t, s in jumps}.items())
        times = np.array([t for t, _ in jumps])
        sizes = np.array([s for _, s in jumps])
        p = EventPath(x0=x0, horizon=10.0, drift=drift, times=times, sizes=sizes)
        for t in (0.0, 0.3, 4.9, 10.0):
            want = x0 + drift * t + sizes[times <= t].sum()
            assert p.value_at(t) == pytest.approx(want, abs=1e-10)


class TestSampling:
    def test_exact_jump_counts_are_poisson(self, ref_spec_bv):
        n, horizon = 3000, 4.0
        counts = np.empty(n)
        for i in range(n):
            p = sample_path(ref_spec_bv, horizon, EXACT, RngStream(11, tag=1, index=i))
            counts[i] = len(p.times)
        # both components at rate 1: total rate 2
        lam = 2 * horizon
        assert counts.mean() == pytest.approx(lam, abs=4 * math.sqrt(lam / n))
        assert counts.var() == pytest.approx(lam, rel=0.12)

    def test_exact_interarrivals_exponential(self, ref_spec_bv):
        gaps = []
        for i in range(400):
            p = sample_path(ref_spec_bv, 50.0, EXACT, RngStream(12, tag=2, index=i))
            gaps.extend(np.diff(p.times))
        stat = scipy.stats.kstest(np.asarray(gaps), scipy.stats.expon(scale=0.5).cdf)
        assert stat.pvalue > 0.01

    def test_exact_mean_growth(self, ref_spec_bv):
        # slope between jumps 0.6, jump drift 0.5 - gamma(1.5): growth rate
        horizon = 20.0
        growth = 0.6 + (0.5 - math.gamma(1.5))
        n = 4000
        ends = np.array([
            sample_path(ref_spec_bv, horizon, EXACT,
                        RngStream(13, tag=3, index=i)).value_at(horizon)
            for i in range(n)])
        se = ends.std(ddof=1) / math.sqrt(n)
        assert ends.mean() == pytest.approx(growth * horizon, abs=4 * se)

    def test_grid_increments_match_moments(self, ref_spec_gauss):
        k, horizon, n = 64, 8.0, 1500
        dt = horizon / k
        incs = np.concatenate([
            np.diff(sample_path(ref_spec_gauss, horizon, Grid(k),
                                RngStream(14, tag=4, index=i)).values)
            for i in range(n)])
        growth = 0.6 + (0.5 - math.gamma(1.5))
        se = incs.std(ddof=1) / math.sqrt(len(incs))
        assert incs.mean() == pytest.approx(growth * dt, abs=4 * se)
        # var: sigma^2 dt + rate dt (E[U^2] + E[W^2]) to first order in dt
        want = dt * (1.0 + 1.0 / 3.0 + 1.0)
        assert incs.var() == pytest.approx(want, rel=0.08)

    def test_grid_values_start_at_x0(self):
        spec = drift_only(0.7, x0=1.2)
        g = sample_path(spec, 2.0, Grid(10), RngStream(1))
        assert g.values[0] == 1.2
        assert g.xhat[0] == 0.0

    def test_csv_round_trip_shape(self, ref_spec_bv, tmp_path):
        p = sample_path(ref_spec_bv, 5.0, EXACT, RngStream(15))
        fname = tmp_path / "p.csv"
        p.to_csv(fname)
        lines = fname.read_text().strip().splitlines()
        assert lines[0] == "time,left_limit,jump,value"
        assert len(lines) >= 2


class TestRngStream:
    def test_streams_are_stateless_and_keyed(self):
        a = RngStream(5, tag=1, index=2).generator().standard_normal(4)
        b = RngStream(5, tag=1, index=2).generator().standard_normal(4)
        c = RngStream(5, tag=1, index=3).generator().standard_normal(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_helpers_rekey(self):
        s = RngStream(9, tag=4, index=7)
        assert s.for_path(3).index == 10
        assert s.with_tag(6).tag == 6
        assert s.with_tag(6).index == 7
        assert s.id == "9/4/7"
