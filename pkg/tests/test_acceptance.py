"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time

import numpy as np
import pytest

from stochfts.certify import (
    LyapunovSpec,
    PowerClassK,
    SampleSpec,
    check_envelope,
    check_fts_condition,
    check_instability_conditions,
    check_lemma23,
    check_linear_growth,
    fit_uasf,
    generator_value,
    settling_bound,
    verify_uasf,
)
from stochfts.estimate import (
    PASS,
    bound_check,
    containment_probability,
    nonattraction_fraction,
    settling_statistics,
)
from stochfts.simulate import SimConfig, simulate_ensemble
from stochfts.systems import MU1, PSI, SdeSystem, builtin_system, controller_gains

SQUARE = PowerClassK(1.0, 2.0)
SAMPLE = SampleSpec(t_min=0.0, t_max=50.0, x_max=2.0, n_samples=10_000, seed=0, x_min=1e-6)
MU2_BAR = f"{PSI} - 0.5"
# mu2 = 2^1.1 * m where m >= 0 and 2 * m where m < 0, written without branches
MU2 = f"(2^1.1 + 2)/2*({MU2_BAR}) + (2^1.1 - 2)/2*abs({MU2_BAR})"
GOLDEN_BOUND_EXAMPLE1 = 16.06946568782408


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return emit


def settling_run(system, x0, bound, seed=0, n_paths=2000):
    cfg = SimConfig(dt=1e-3, t_end=1.5 * bound, n_paths=n_paths, master_seed=seed, absorption_radius=1e-3)
    return simulate_ensemble(system, x0, cfg)


def example1_bound():
    cert = fit_uasf(MU1, 0.0, 200.0, 2001)
    return settling_bound(cert, 2 / 3, SQUARE, 0.6, 0.0)


def test_criterion_1_example1_certificates(verdict):
    start = time.perf_counter()
    system = builtin_system("example1")
    V = LyapunovSpec("x1^2", kappa=2 / 3)
    counts = {
        "envelope": check_envelope(V, SQUARE, SQUARE, SAMPLE).n_violations,
        "fts": check_fts_condition(system, V, MU1, SAMPLE).n_violations,
        "linear_growth": check_linear_growth(system, SAMPLE, H=9 / 4).report.n_violations,
        "lemma23": sum(r.n_violations for r in
                       check_lemma23(system, LyapunovSpec("x1^2"), "4/3", 2 / 3, SQUARE, SAMPLE).values()),
    }
    elapsed = time.perf_counter() - start
    ok = all(v == 0 for v in counts.values()) and elapsed < 10
    verdict(1, ok, f"violations {counts}, {elapsed:.2f}s")


def test_criterion_2_example2_certificates(verdict):
    start = time.perf_counter()
    report = check_fts_condition(builtin_system("example2"), LyapunovSpec("x1^2 + x2^2", kappa=0.9), MU2, SAMPLE)
    cert = verify_uasf(MU2_BAR, 0.5, 5.0, 0.0, 100.0)
    elapsed = time.perf_counter() - start
    ok = report.n_violations == 0 and cert.verified and cert.max_residual <= 1e-6 and elapsed < 10
    verdict(2, ok, f"fts violations {report.n_violations}, uasf residual {cert.max_residual:.3g} "
                   f"({cert.status}), {elapsed:.2f}s")


def test_criterion_3_example1_bound_dominance(verdict):
    start = time.perf_counter()
    bound = example1_bound()
    stats = settling_statistics(settling_run(builtin_system("example1"), [0.6], bound))
    check = bound_check(stats, bound)
    elapsed = time.perf_counter() - start
    ok = (abs(bound - GOLDEN_BOUND_EXAMPLE1) <= 1e-6 * GOLDEN_BOUND_EXAMPLE1 and stats.fraction_absorbed >= 0.95
          and check.verdict == PASS and elapsed < 120)
    verdict(3, ok, f"bound {bound:.6f}, absorbed {stats.fraction_absorbed:.3f}, "
                   f"mean+3se {check.upper:.4f}, {check.verdict}, {elapsed:.1f}s")


def test_criterion_4_example2_bound_dominance(verdict):
    start = time.perf_counter()
    base = verify_uasf(MU2_BAR, 0.5, 5.0, 0.0, 100.0)
    # psi < 1 so the positive part of mu2_bar is below 0.5; the extra
    # (2^1.1 - 2) * positive part costs (2^1.1 - 2) * 0.5 of decay rate
    c2 = 2 * base.c - (2**1.1 - 2) * 0.5
    d2 = 2 * base.d
    cert = verify_uasf(MU2, c2, d2, 0.0, 100.0)
    bound = settling_bound(cert, 0.9, SQUARE, math.hypot(0.4, 0.6), 0.0)
    stats = settling_statistics(settling_run(builtin_system("example2"), [0.4, -0.6], bound))
    check = bound_check(stats, bound)
    elapsed = time.perf_counter() - start
    ok = base.verified and stats.fraction_absorbed >= 0.95 and check.verdict == PASS and elapsed < 180
    verdict(4, ok, f"certificate (c, d) = ({c2:.4f}, {d2:g}) {cert.status}, bound {bound:.4f}, "
                   f"absorbed {stats.fraction_absorbed:.3f}, mean+3se {check.upper:.4f}, {check.verdict}, "
                   f"{elapsed:.1f}s")


def test_criterion_5_closed_loop(verdict):
    start = time.perf_counter()
    g = controller_gains(4, 0.3)
    identity = abs(g.d1_tilde + 2 ** (1 - g.lam) * g.h3 / (1 + g.lam) - 0.15)
    system = builtin_system("example3", {"l": 4, "c1": 0.3, "c2": 0.3})
    cfg = SimConfig(dt=1e-3, t_end=50.0, n_paths=500, absorption_radius=1e-2)
    stats = settling_statistics(simulate_ensemble(system, [0.2, 0.1, -0.2], cfg))
    elapsed = time.perf_counter() - start
    ok = g.d1 == 0.15 and identity <= 1e-10 and stats.fraction_absorbed >= 0.90 and elapsed < 180
    verdict(5, ok, f"d1 = {g.d1}, identity residual {identity:.2e}, absorbed {stats.fraction_absorbed:.3f}, "
                   f"{elapsed:.1f}s")


def test_criterion_6_instability_contrast(verdict):
    start = time.perf_counter()
    system = builtin_system("instability1")
    mu = repr(-0.1)
    reports = check_instability_conditions(system, LyapunovSpec("x1^2", grad=["2*x1"], hessian=[["2"]]), mu,
                                           "4*exp(-2*t)", 2.0, SAMPLE)
    integral = reports["a_integral"].worst_point["integral"]
    cfg = SimConfig(dt=1e-3, t_end=50.0, n_paths=1000, absorption_radius=1e-4)
    ens = simulate_ensemble(system, [0.5], cfg)
    attracted = nonattraction_fraction(ens, 1e-4)
    contained = containment_probability(ens, 5.0)
    elapsed = time.perf_counter() - start
    ok = (all(r.n_violations == 0 for r in reports.values()) and integral <= 2 + 1e-8
          and attracted.estimate <= 0.01 and contained.estimate >= 0.95 and elapsed < 120)
    verdict(6, ok, f"condition violations {[r.n_violations for r in reports.values()]}, int a = {integral:.10f}, "
                   f"attracted {attracted.estimate:.3f}, contained {contained.estimate:.3f}, {elapsed:.1f}s")


def test_criterion_7_generator_oracle(verdict):
    cases = [(-1.0, 0.5), (0.3, 0.2), (-2.0, 1.0), (1.5, 0.3), (-0.5, 2.0)]
    closed = {
        "x1^2": lambda a, s, x: (2 * a + s * s) * x**2,
        "x1^4": lambda a, s, x: (4 * a + 6 * s * s) * x**4,
    }
    rng = np.random.default_rng(2024)
    worst_rel, worst_ratio = 0.0, math.inf
    for a, s in cases:
        system = SdeSystem("linear", 1, 1, [f"{a!r}*x1"], [[f"{s!r}*x1"]])
        x = rng.uniform(-2, 2, 400)
        t = rng.uniform(0, 10, 400)
        for v, exact_fn in closed.items():
            exact = exact_fn(a, s, x)
            lv = generator_value(system, LyapunovSpec(v), t, x[None, :])
            worst_rel = max(worst_rel, float(np.max(np.abs(lv - exact) / (1 + np.abs(exact)))))
        # convergence in the truncation regime; x^2 is differenced exactly
        xs = x[np.abs(x) > 0.2]
        ts = t[np.abs(x) > 0.2]
        exact = closed["x1^4"](a, s, xs)
        err = [np.max(np.abs(generator_value(system, LyapunovSpec("x1^4", fd_step=h), ts, xs[None, :]) - exact))
               for h in (1e-2, 5e-3)]
        worst_ratio = min(worst_ratio, err[0] / err[1])
    # the stencil error on x^4 is exactly c*h^2, so 4 holds up to rounding
    ok = worst_rel <= 1e-6 and worst_ratio >= 4 * (1 - 1e-6)
    verdict(7, ok, f"worst relative error {worst_rel:.2e}, smallest halving ratio {worst_ratio:.8f}")


def test_criterion_8_determinism(verdict):
    bound = example1_bound()
    system = builtin_system("example1")
    first = settling_run(system, [0.6], bound, seed=0)
    again = settling_run(system, [0.6], bound, seed=0)
    other = settling_run(system, [0.6], bound, seed=1)
    same = np.array_equal(np.sort(first.settling_times), np.sort(again.settling_times), equal_nan=True)
    a, b = settling_statistics(first), settling_statistics(other)
    shift = abs(a.mean - b.mean)
    combined = math.hypot(a.stderr, b.stderr)
    ok = same and shift < 3 * combined
    verdict(8, ok, f"identical multiset {same}, mean shift {shift:.4f} vs 3 combined se {3 * combined:.4f}")
