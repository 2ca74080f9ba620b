import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochfts.certify import (
    LyapunovSpec,
    PowerClassK,
    SampleSpec,
    UasfCertificate,
    check_envelope,
    check_fts_condition,
    check_instability_conditions,
    check_lemma23,
    check_linear_growth,
    draw_samples,
    fit_uasf,
    generator_value,
    integrate_time_function,
    settling_bound,
    stability_delta,
    verify_uasf,
)
from stochfts.expr import DomainError, parse
from stochfts.systems import MU1, PHI, PSI, SdeSystem, builtin_system

SQUARE = PowerClassK(1.0, 2.0)
ACCEPT_SAMPLE = SampleSpec(t_min=0.0, t_max=50.0, x_max=2.0, n_samples=10_000, seed=0, x_min=1e-6)
MU2_BAR = f"{PSI} - 0.5"
# piecewise scaling: 2^1.1 * m where m >= 0, 2 * m where m < 0
MU2 = f"(2^1.1 + 2)/2*({MU2_BAR}) + (2^1.1 - 2)/2*abs({MU2_BAR})"
MU0 = f"2*({PHI}) + 1"

# closed-form oracle on the package's grid (tests/oracles/oracle_uasf_fit.py)
GOLDEN_FIT_C = 0.62117389210739596
GOLDEN_FIT_D = 7.8477965626978991
GOLDEN_BOUND_EXAMPLE1 = 16.06946568782408
GOLDEN_BOUND_C03_D4 = 20.447119942313459


def linear(a, sigma):
    return SdeSystem(f"linear({a},{sigma})", 1, 1, [f"{a!r}*x1"], [[f"{sigma!r}*x1"]])


def certificate(c, d):
    return UasfCertificate(mu=parse("-1"), c=c, d=d, t0=0.0, horizon=1.0, n_grid=3, max_residual=0.0)


class TestIntegrate:
    def test_sine(self):
        assert integrate_time_function("sin(t)", 0.0, math.pi, 200) == pytest.approx(2.0, abs=1e-8)

    def test_instability_rate(self):
        value = integrate_time_function("4*exp(-2*t)", 0.0, 10.0, 2000)
        assert value == pytest.approx(2 * (1 - math.exp(-20)), abs=1e-10)

    def test_empty_interval(self):
        assert integrate_time_function("t", 3.0, 3.0, 10) == 0.0

    def test_fourth_order(self):
        coarse = abs(integrate_time_function("exp(t)", 0, 1, 8) - (math.e - 1))
        fine = abs(integrate_time_function("exp(t)", 0, 1, 16) - (math.e - 1))
        assert coarse / fine == pytest.approx(16, rel=0.05)

    def test_rejects_state_dependence(self):
        with pytest.raises(ValueError):
            integrate_time_function("x1", 0, 1, 10)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            integrate_time_function("ln(t)", 0, 1, 10)


class TestVerifyUasf:
    def test_negative_one(self):
        cert = verify_uasf("-1", 1.0, 0.0, 0.0, 10.0)
        assert cert.verified
        assert abs(cert.max_residual) <= 1e-12

    def test_mu2_bar(self):
        cert = verify_uasf(MU2_BAR, 0.5, 5.0, 0.0, 100.0)
        assert cert.verified and cert.max_residual <= 1e-6

    def test_mu0(self):
        assert verify_uasf(MU0, 0.5, 5.0, 0.0, 100.0).verified

    def test_scaled_mu2(self):
        # sup(psi) < 1 bounds the positive part of m by 0.5
        cert = verify_uasf(MU2, 1 - (2**1.1 - 2) / 2, 10.0, 0.0, 100.0)
        assert cert.verified

    def test_positive_mu_fails(self):
        cert = verify_uasf("1", 1.0, 0.0, 0.0, 10.0)
        assert not cert.verified and cert.max_residual > 0

    @pytest.mark.parametrize("c, d", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.1)])
    def test_invalid_pair(self, c, d):
        with pytest.raises(ValueError):
            verify_uasf("-1", c, d, 0.0, 10.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 5.0), st.floats(0.0, 0.49))
    def test_monotone_in_pair(self, extra_d, less_c):
        base = verify_uasf(MU2_BAR, 0.5, 5.0, 0.0, 60.0)
        looser = verify_uasf(MU2_BAR, 0.5 - less_c, 5.0 + extra_d, 0.0, 60.0)
        assert base.verified and looser.verified
        assert looser.max_residual <= base.max_residual


class TestFitUasf:
    def test_negative_one(self):
        cert = fit_uasf("-1", 0.0, 50.0)
        assert cert.verified
        assert cert.c == pytest.approx(1.0, abs=1e-9)
        assert cert.d == pytest.approx(0.0, abs=1e-9)

    def test_mu1_golden(self):
        cert = fit_uasf(MU1, 0.0, 200.0, 2001)
        assert cert.verified
        assert cert.c >= 0.2
        assert cert.c == pytest.approx(GOLDEN_FIT_C, rel=1e-6)
        assert cert.d == pytest.approx(GOLDEN_FIT_D, rel=1e-6)

    def test_positive_mu_fit_failed(self):
        assert fit_uasf("1", 0.0, 50.0).status == "fit-failed"


class TestGenerator:
    def test_linear_closed_form(self):
        assert generator_value(linear(-1.0, 0.5), LyapunovSpec("x1^2"), 0.0, [2.0]) == pytest.approx(-7.0, rel=1e-7)

    def test_constant_v(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, (1, 50))
        lv = generator_value(builtin_system("example1"), LyapunovSpec("3"), rng.uniform(0, 5, 50), x)
        np.testing.assert_allclose(lv, 0.0, atol=1e-9)

    def test_instability_construction(self):
        system = builtin_system("instability1", {"mu": -1})
        assert generator_value(system, LyapunovSpec("x1^2"), 1.0, [0.5]) == pytest.approx(-0.25, rel=1e-7)

    def test_time_dependent_v(self):
        # V = t x^2 on dx = -x dt: L V = x^2 - 2 t x^2
        value = generator_value(linear(-1.0, 0.0), LyapunovSpec("t*x1^2"), 2.0, [1.5])
        assert value == pytest.approx(1.5**2 * (1 - 4.0), rel=1e-7)

    def test_two_dimensional_cross_terms(self):
        # V = x1 x2 with g = [[x2], [x1]] gives 1/2 Tr(g^T V_xx g) = x1 x2
        system = SdeSystem("cross", 2, 1, ["0", "0"], [["x2"], ["x1"]])
        assert generator_value(system, LyapunovSpec("x1*x2"), 0.0, [0.7, -1.3]) == pytest.approx(-0.91, rel=1e-7)

    def test_analytic_derivatives_bypass_stencil(self):
        spec = LyapunovSpec("x1^2", grad=["2*x1"], hessian=[["2"]])
        assert generator_value(linear(-1.0, 0.5), spec, 0.0, [2.0]) == -7.0

    def test_stencil_domain_error_names_point(self):
        with pytest.raises(DomainError, match="stencil point"):
            generator_value(linear(-1.0, 0.0), LyapunovSpec("sqrt(x1)"), 0.0, [0.0])

    def test_dimension_checked(self):
        with pytest.raises(ValueError):
            generator_value(linear(-1.0, 0.0), LyapunovSpec("x1^2"), 0.0, [1.0, 2.0])


LINEAR_CASES = [(-1.0, 0.5), (0.3, 0.2), (-2.0, 1.0), (1.5, 0.3), (-0.5, 2.0)]
POLYNOMIALS = {
    "x1^2": lambda a, s, x: (2 * a + s * s) * x**2,
    "x1^4": lambda a, s, x: (4 * a + 6 * s * s) * x**4,
}


def _generator_error(a, s, v, step, t, x):
    lv = generator_value(linear(a, s), LyapunovSpec(v, fd_step=step), t, x[None, :])
    return np.abs(lv - POLYNOMIALS[v](a, s, x))


@pytest.mark.parametrize("a, s", LINEAR_CASES)
@pytest.mark.parametrize("v", sorted(POLYNOMIALS))
def test_generator_matches_closed_form(a, s, v):
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, 500)
    t = rng.uniform(0, 10, 500)
    err = _generator_error(a, s, v, 1e-4, t, x)
    assert np.all(err <= 1e-6 * (1 + np.abs(POLYNOMIALS[v](a, s, x))))


@pytest.mark.parametrize("a, s", LINEAR_CASES)
def test_stencil_is_second_order(a, s):
    # x^4 has a pure h^2 stencil error, so the exact ratio is 4; allow rounding only
    rng = np.random.default_rng(8)
    x = rng.uniform(0.2, 2, 50) * rng.choice([-1, 1], 50)
    t = rng.uniform(0, 10, 50)
    for step in (2e-2, 1e-2):
        ratio = _generator_error(a, s, "x1^4", step, t, x).max() / _generator_error(a, s, "x1^4", step / 2, t, x).max()
        assert ratio >= 4 * (1 - 1e-6)


class TestSamples:
    def test_radius_range_and_determinism(self):
        spec = SampleSpec(0, 5, 2.0, 4000, 3, 1e-6)
        t, x = draw_samples(spec, 2)
        r = np.linalg.norm(x, axis=0)
        assert x.shape == (2, 4000)
        assert r.min() >= 1e-6 * (1 - 1e-12) and r.max() <= 2.0 * (1 + 1e-12)
        assert r.min() < 1e-4  # log-radius half reaches close to the origin
        t2, x2 = draw_samples(spec, 2)
        np.testing.assert_array_equal(x, x2)


class TestEnvelope:
    def test_equality_envelope(self):
        assert check_envelope(LyapunovSpec("x1^2"), SQUARE, SQUARE, ACCEPT_SAMPLE).n_violations == 0

    def test_two_dimensional(self):
        report = check_envelope(LyapunovSpec("x1^2 + x2^2"), SQUARE, PowerClassK(2, 2), ACCEPT_SAMPLE, r=2)
        assert report.n_violations == 0

    def test_deliberate_failure(self):
        report = check_envelope(LyapunovSpec("x1^2"), PowerClassK(2, 2), SQUARE, ACCEPT_SAMPLE)
        assert report.n_violations == report.n_samples


class TestFts:
    def test_example1(self):
        report = check_fts_condition(builtin_system("example1"), LyapunovSpec("x1^2", kappa=2 / 3), MU1,
                                     ACCEPT_SAMPLE)
        assert report.n_violations == 0

    def test_example2(self):
        report = check_fts_condition(builtin_system("example2"), LyapunovSpec("x1^2 + x2^2", kappa=0.9), MU2,
                                     ACCEPT_SAMPLE)
        assert report.n_violations == 0

    def test_example2_unscaled_mu_fails(self):
        # using mu2_bar alone ignores the power-mean constants
        report = check_fts_condition(builtin_system("example2"), LyapunovSpec("x1^2 + x2^2", kappa=0.9),
                                     f"2*({MU2_BAR})", ACCEPT_SAMPLE)
        assert report.n_violations > 0

    def test_unstable_linear(self):
        report = check_fts_condition(SdeSystem("grow", 1, 1, ["x1"], [["0"]]), LyapunovSpec("x1^2"), "-1",
                                     SampleSpec(n_samples=500))
        assert report.n_violations == report.n_samples

    def test_report_invariant(self):
        report = check_fts_condition(linear(0.5, 0.0), LyapunovSpec("x1^2"), "0", SampleSpec(n_samples=200))
        assert (report.n_violations == 0) == (report.worst_violation <= report.tolerance)
        assert report.worst_point["x"]


class TestInstability:
    A = "4*exp(-2*t)"

    @pytest.mark.parametrize("mu", [-1.0, -0.1])
    def test_instability1_passes(self, mu):
        system = builtin_system("instability1", {"mu": mu})
        reports = check_instability_conditions(system, LyapunovSpec("x1^2"), repr(mu), self.A, 2.0, ACCEPT_SAMPLE)
        assert all(r.n_violations == 0 for r in reports.values()), {k: r.worst_violation for k, r in reports.items()}
        assert reports["a_integral"].worst_point["integral"] <= 2.0 + 1e-8

    def test_example1_is_not_an_equality(self):
        reports = check_instability_conditions(builtin_system("example1"), LyapunovSpec("x1^2"), MU1, "0", 0.0,
                                               SampleSpec(n_samples=500))
        assert reports["equality"].n_violations > 0

    def test_noiseless_diffusion_bound(self):
        reports = check_instability_conditions(linear(-1.0, 0.0), LyapunovSpec("x1^2"), "-2", "0", 0.0,
                                               SampleSpec(n_samples=500))
        assert reports["diffusion_bound"].n_violations == 0
        assert reports["equality"].n_violations == 0


class TestLinearGrowth:
    def test_example1_h3(self):
        out = check_linear_growth(builtin_system("example1"), SampleSpec(0, 100, 10, 100_000, 1), H=9 / 4)
        assert out.report.n_violations == 0
        assert out.estimated_H <= 9 / 4

    def test_superlinear(self):
        out = check_linear_growth(SdeSystem("sq", 1, 1, ["x1^2"], [["0"]]), SampleSpec(0, 1, 100, 5000, 0), H=100)
        assert out.report.n_violations > 0

    def test_zero_system(self):
        out = check_linear_growth(SdeSystem("zero", 1, 1, ["0"], [["0"]]), SampleSpec(n_samples=100))
        assert out.estimated_H == 0.0 and out.report is None


class TestGeneratorGrowthBound:
    def test_example1(self):
        reports = check_lemma23(builtin_system("example1"), LyapunovSpec("x1^2"), "4/3", 2 / 3, SQUARE,
                                ACCEPT_SAMPLE)
        assert all(r.n_violations == 0 for r in reports.values())

    def test_unstable_violates(self):
        reports = check_lemma23(SdeSystem("grow", 1, 1, ["x1"], [["0"]]), LyapunovSpec("x1^2"), "0", 0.0, SQUARE,
                                SampleSpec(n_samples=200))
        assert reports["generator"].n_violations > 0

    def test_contracting(self):
        reports = check_lemma23(linear(-1.0, 0.0), LyapunovSpec("x1^2"), "0", 0.0, SQUARE, SampleSpec(n_samples=200))
        assert all(r.n_violations == 0 for r in reports.values())


class TestSettlingBound:
    def test_plug_in(self):
        assert settling_bound(certificate(1.0, 0.0), 0.0, SQUARE, 1.0, 0.0) == 1.0

    def test_arithmetic_example(self):
        assert settling_bound(certificate(0.3, 4.0), 2 / 3, SQUARE, 0.6, 0.0) == pytest.approx(GOLDEN_BOUND_C03_D4,
                                                                                              rel=1e-14)
        assert GOLDEN_BOUND_C03_D4 == pytest.approx(20.45, abs=0.01)

    def test_example1_golden(self):
        bound = settling_bound(fit_uasf(MU1, 0.0, 200.0, 2001), 2 / 3, SQUARE, 0.6, 0.0)
        assert bound == pytest.approx(GOLDEN_BOUND_EXAMPLE1, rel=1e-6)

    @given(st.floats(0.01, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 3))
    def test_kappa_zero_form(self, c, d, x0, t0):
        cert = certificate(c, d)
        assert settling_bound(cert, 0.0, SQUARE, x0, t0) == pytest.approx(t0 + d / c + x0**2 / c, rel=1e-12)

    def test_unverified_rejected(self):
        cert = verify_uasf("1", 1.0, 0.0, 0.0, 10.0)
        with pytest.raises(ValueError, match="not verified"):
            settling_bound(cert, 0.0, SQUARE, 1.0)


class TestStabilityDelta:
    def test_identity_envelopes(self):
        ident = PowerClassK(1, 1)
        assert stability_delta(0.1, 1.0, 0.0, ident, ident, 0.0) == pytest.approx(0.1, rel=1e-15)

    def test_closed_form_inverse(self):
        value = stability_delta(0.1, 1.0, 0.0, SQUARE, PowerClassK(2, 2), 0.0)
        assert value == pytest.approx(math.sqrt(0.05), rel=1e-14)

    def test_vacuous(self):
        assert stability_delta(0.1, 1.0, 0.5, SQUARE, SQUARE, 10.0) is None

    @pytest.mark.parametrize("eps, R", [(0.0, 1.0), (1.0, 1.0), (0.5, 0.0)])
    def test_invalid(self, eps, R):
        with pytest.raises(ValueError):
            stability_delta(eps, R, 0.0, SQUARE, SQUARE, 0.0)

    @given(st.floats(0.01, 0.99), st.floats(0.1, 100), st.floats(0, 0.95), st.floats(0.1, 3), st.floats(0.5, 3),
           st.floats(0, 2))
    def test_round_trip(self, eps, R, kappa, a, p, d):
        low, high = PowerClassK(a, p), PowerClassK(2 * a, p)
        delta = stability_delta(eps, R, kappa, low, high, d)
        target = eps * low(R) ** (1 - kappa) - d * (1 - kappa)
        if delta is None:
            assert target <= 0
        else:
            assert high(delta) ** (1 - kappa) == pytest.approx(target, rel=1e-10, abs=1e-12)


@given(st.floats(0.1, 10), st.floats(0.2, 4), st.floats(0, 100))
def test_power_class_k_inverse(a, p, s):
    gamma = PowerClassK(a, p)
    assert gamma.inverse(gamma(s)) == pytest.approx(s, rel=1e-12, abs=1e-12)
