from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from cohortmix.densities import (
    ComponentSpec,
    Family,
    NaturalParams,
    gamma_from_mode_sd,
    invgauss_from_mean_sd,
    lgamma_stirling,
    log_density,
    midpoint_mass,
    natural_params,
    quantile,
    summary_stats,
    weibull_from_median_uqd,
)

locations = st.floats(15.0, 45.0)
spreads = st.floats(2.0, 12.0)
families = st.sampled_from(list(Family))


def scipy_dist(spec: ComponentSpec):
    """Independent frozen scipy distribution for a spec."""
    nat = natural_params(spec)
    if spec.family is Family.GAMMA:
        return stats.gamma(a=nat.p1, scale=1.0 / nat.p2)
    if spec.family is Family.HADWIGER:
        return stats.invgauss(nat.p1 / nat.p2, scale=nat.p2)
    return stats.weibull_min(nat.p1, scale=nat.p2)


class TestFamily:
    def test_parse_names(self):
        assert Family.parse("Gamma") is Family.GAMMA
        assert Family.parse(" hadwiger ") is Family.HADWIGER
        assert str(Family.WEIBULL) == "weibull"

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown density family"):
            Family.parse("lognormal")


class TestGamma:
    def test_mode_zero_is_exponential(self):
        nat = gamma_from_mode_sd(0.0, 2.0)
        assert nat.p1 == 1.0
        assert nat.p2 == 0.5

    def test_moment_equations_back_substitute(self):
        nat = gamma_from_mode_sd(25.0, 5.0)
        k, r = nat.p1, nat.p2
        assert abs((k - 1) / r - 25.0) < 1e-10
        assert abs(math.sqrt(k) / r - 5.0) < 1e-10

    def test_round_trip(self):
        mode, sd = summary_stats(gamma_from_mode_sd(30.0, 4.0))
        assert mode == pytest.approx(30.0, rel=1e-10)
        assert sd == pytest.approx(4.0, rel=1e-10)

    def test_mode_and_sd_match_scipy(self):
        dist = scipy_dist(ComponentSpec("gamma", 25.0, 5.0))
        assert dist.std() == pytest.approx(5.0, rel=1e-10)
        x = np.linspace(20, 30, 20001)
        assert x[np.argmax(dist.pdf(x))] == pytest.approx(25.0, abs=1e-3)

    @pytest.mark.parametrize("mode, sd", [(-1.0, 2.0), (10.0, 0.0), (math.nan, 1.0), (5.0, math.inf)])
    def test_invalid(self, mode, sd):
        with pytest.raises(ValueError):
            gamma_from_mode_sd(mode, sd)


class TestInverseGaussian:
    def test_standard(self):
        assert invgauss_from_mean_sd(1.0, 1.0) == NaturalParams(Family.HADWIGER, 1.0, 1.0)

    def test_lambda_formula(self):
        assert invgauss_from_mean_sd(30.0, 5.0).p2 == pytest.approx(1080.0, rel=1e-15)

    def test_sd_by_quadrature(self):
        spec = ComponentSpec("hadwiger", 28.0, 6.0)
        pdf = lambda x: math.exp(log_density(spec, x))  # noqa: E731
        mean = integrate.quad(lambda x: x * pdf(x), 0, 500, limit=200)[0]
        second = integrate.quad(lambda x: x * x * pdf(x), 0, 500, limit=200)[0]
        assert mean == pytest.approx(28.0, abs=1e-6)
        assert math.sqrt(second - mean**2) == pytest.approx(6.0, abs=1e-6)

    @pytest.mark.parametrize("mean, sd", [(0.0, 1.0), (1.0, -1.0)])
    def test_invalid(self, mean, sd):
        with pytest.raises(ValueError):
            invgauss_from_mean_sd(mean, sd)


class TestWeibull:
    def test_equal_gap_is_exponential(self):
        nat = weibull_from_median_uqd(20.0, 20.0)
        assert nat.p1 == pytest.approx(1.0, rel=1e-15)
        assert nat.p2 == pytest.approx(20.0 / math.log(2.0), rel=1e-14)
        assert nat.p2 == pytest.approx(28.8539, abs=1e-4)

    def test_quartiles_via_scipy(self):
        nat = weibull_from_median_uqd(33.0, 4.0)
        dist = stats.weibull_min(nat.p1, scale=nat.p2)
        assert dist.ppf(0.5) == pytest.approx(33.0, abs=1e-10)
        assert dist.ppf(0.75) == pytest.approx(37.0, abs=1e-10)

    @given(st.floats(1.0, 80.0), st.floats(0.1, 40.0))
    def test_median_identity(self, median, uqd):
        spec = ComponentSpec("weibull", median, uqd)
        assert quantile(spec, 0.5) == pytest.approx(median, rel=1e-12)

    @given(st.floats(1.0, 80.0), st.floats(0.01, 3.0))
    def test_light_tail_iff_shape_above_one(self, median, ratio):
        assume(abs(ratio - 1.0) > 1e-9)
        nat = weibull_from_median_uqd(median, ratio * median)
        assert (ratio < 1.0) == (nat.p1 > 1.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            weibull_from_median_uqd(0.0, 1.0)


class TestRoundTrip:
    @given(families, st.floats(0.5, 60.0), st.floats(0.2, 20.0))
    def test_conversions_round_trip(self, family, location, spread):
        loc, spr = summary_stats(natural_params(ComponentSpec(family, location, spread)))
        assert loc == pytest.approx(location, rel=1e-10)
        assert spr == pytest.approx(spread, rel=1e-10)

    def test_gamma_mode_zero_accepted_others_not(self):
        ComponentSpec("gamma", 0.0, 1.0)
        for family in ("hadwiger", "weibull"):
            with pytest.raises(ValueError):
                ComponentSpec(family, 0.0, 1.0)


class TestLogDensity:
    def test_exponential_value(self):
        spec = ComponentSpec("gamma", 0.0, 2.0)
        assert log_density(spec, 0.5) == pytest.approx(math.log(0.5) - 0.25, abs=1e-14)

    def test_weibull_exponential_case(self):
        spec = ComponentSpec("weibull", 20.0, 20.0)
        expected = stats.expon(scale=20.0 / math.log(2.0)).logpdf(20.0)
        assert log_density(spec, 20.0) == pytest.approx(expected, abs=1e-12)

    @given(families, locations, spreads, st.floats(0.5, 90.0))
    def test_matches_scipy(self, family, location, spread, x):
        spec = ComponentSpec(family, location, spread)
        expected = scipy_dist(spec).logpdf(x)
        assume(expected > -600)
        assert log_density(spec, x) == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_nonpositive_support(self):
        spec = ComponentSpec("gamma", 20.0, 5.0)
        out = log_density(spec, np.array([-1.0, 0.0, 1.0]))
        assert np.isneginf(out[:2]).all()
        assert np.isfinite(out[2])

    @given(families, locations, spreads)
    def test_normalized_by_quadrature(self, family, location, spread):
        spec = ComponentSpec(family, location, spread)
        total = integrate.quad(lambda x: math.exp(log_density(spec, x)), 0, 500, points=[location], limit=200)[0]
        assert total == pytest.approx(1.0, abs=1e-6)

    @given(families, locations, spreads, st.floats(15.0, 50.0))
    def test_richardson_convergence_in_location(self, family, location, spread, x):
        spec_at = lambda loc: ComponentSpec(family, loc, spread)  # noqa: E731
        h = 0.2

        def central(step):
            return (log_density(spec_at(location + step), x) - log_density(spec_at(location - step), x)) / (2 * step)

        d1, d2, d3 = central(h), central(h / 2), central(h / 4)
        assume(abs(d1 - d2) > 1e-8)
        ratio = (d1 - d2) / (d2 - d3)
        assert 3.2 < ratio < 4.8


class TestMidpointMass:
    @given(families, locations, spreads)
    def test_sum_matches_cdf(self, family, location, spread):
        # midpoint rule error is O(1e-3) here because x**(k-1) is not smooth at 0
        spec = ComponentSpec(family, location, spread)
        exact = scipy_dist(spec).cdf(200.0)
        assert midpoint_mass(spec, np.arange(200)).sum() == pytest.approx(exact, abs=3e-3)

    def test_unimodal_about_location(self):
        for family in Family:
            spec = ComponentSpec(family, 30.0, 3.0)
            assert midpoint_mass(spec, 30) > midpoint_mass(spec, 45)

    def test_exponential_at_zero(self):
        spec = ComponentSpec("gamma", 0.0, 2.0)
        assert midpoint_mass(spec, 0) == pytest.approx(math.exp(-0.25) / 2, rel=1e-14)

    def test_equals_density_at_midpoint(self):
        spec = ComponentSpec("hadwiger", 28.0, 5.0)
        ages = np.arange(10, 50)
        np.testing.assert_allclose(midpoint_mass(spec, ages), scipy_dist(spec).pdf(ages + 0.5), rtol=1e-10)

    def test_negative_age_rejected(self):
        with pytest.raises(ValueError):
            midpoint_mass(ComponentSpec("gamma", 20.0, 4.0), -1)


class TestQuantile:
    @given(families, locations, spreads, st.floats(0.01, 0.99))
    def test_matches_scipy(self, family, location, spread, q):
        spec = ComponentSpec(family, location, spread)
        assert quantile(spec, q) == pytest.approx(scipy_dist(spec).ppf(q), rel=1e-8)


class TestStirling:
    def test_against_scipy(self):
        x = np.concatenate([np.linspace(0.05, 20, 4000), np.logspace(1, 8, 500)])
        got = lgamma_stirling(x)
        ref = special.gammaln(x)
        assert np.max(np.abs(got - ref) / np.maximum(1.0, np.abs(ref))) < 1e-13
