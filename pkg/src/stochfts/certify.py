"""Sampling-based checks of Lyapunov / UASF certificate conditions.

Every checker evaluates its inequality on a seeded random sample of (t, x)
points and returns a :class:`ViolationReport`. A report with zero violations
is numerical evidence, not a proof.

Violation magnitudes are scaled per check (see each function) so that a
single scalar tolerance applies: a sample violates iff its scaled magnitude
exceeds ``tolerance``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .expr import DomainError, Expression, parse
from .systems import SdeSystem

__all__ = [
    "PowerClassK",
    "LyapunovSpec",
    "UasfCertificate",
    "ViolationReport",
    "SampleSpec",
    "LinearGrowthReport",
    "draw_samples",
    "integrate_time_function",
    "verify_uasf",
    "fit_uasf",
    "generator_value",
    "check_envelope",
    "check_fts_condition",
    "check_instability_conditions",
    "check_linear_growth",
    "check_lemma23",
    "settling_bound",
    "stability_delta",
]

UASF_TOLERANCE = 1e-6
# dense grid for kinked integrands such as |sin 2t|
PANELS_PER_UNIT_TIME = 200
EVIDENCE_NOTE = "sampling-based evidence over a seeded random sample, not a proof"


def _expr(e) -> Expression:
    return e if isinstance(e, Expression) else parse(str(e))


def _time_only(e, what: str) -> Expression:
    e = _expr(e)
    if not e.is_time_only:
        raise ValueError(f"{what} must depend on t only, got variables {sorted(e.variables)}")
    return e


@dataclass(frozen=True)
class PowerClassK:
    """gamma(s) = a * s**p with a, p > 0 (class K-infinity)."""

    a: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.p > 0):
            raise ValueError(f"class-K power function needs a > 0 and p > 0, got a={self.a}, p={self.p}")

    def __call__(self, s):
        return self.a * np.asarray(s, dtype=float) ** self.p if np.ndim(s) else self.a * float(s) ** self.p

    def inverse(self, y):
        return (np.asarray(y, dtype=float) / self.a) ** (1.0 / self.p) if np.ndim(y) else (float(y) / self.a) ** (1.0 / self.p)


@dataclass(frozen=True)
class LyapunovSpec:
    V: Expression
    kappa: float = 0.0
    fd_step: float = 1e-4
    fd_floor: float = 1e-7
    grad: tuple | None = None
    hessian: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "V", _expr(self.V))
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"kappa must lie in [0, 1), got {self.kappa}")
        if not (self.fd_step > 0 and self.fd_floor > 0):
            raise ValueError("finite-difference steps must be positive")
        if self.grad is not None:
            object.__setattr__(self, "grad", tuple(_expr(e) for e in self.grad))
        if self.hessian is not None:
            object.__setattr__(self, "hessian", tuple(tuple(_expr(e) for e in row) for row in self.hessian))


@dataclass
class UasfCertificate:
    mu: Expression
    c: float
    d: float
    t0: float
    horizon: float
    n_grid: int
    max_residual: float
    tolerance: float = UASF_TOLERANCE
    status: str = "verified"
    reason: str = ""

    @property
    def verified(self) -> bool:
        return self.status == "verified"

    def to_dict(self) -> dict:
        return {
            "mu": str(self.mu),
            "c": self.c,
            "d": self.d,
            "t0": self.t0,
            "horizon": self.horizon,
            "n_grid": self.n_grid,
            "max_residual": self.max_residual,
            "tolerance": self.tolerance,
            "status": self.status,
            "reason": self.reason,
        }


@dataclass
class ViolationReport:
    check: str
    n_samples: int
    n_violations: int
    worst_violation: float
    worst_point: dict | None
    tolerance: float
    scale: str = ""

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "n_samples": self.n_samples,
            "n_violations": self.n_violations,
            "worst_violation": self.worst_violation,
            "worst_point": self.worst_point,
            "tolerance": self.tolerance,
            "scale": self.scale,
            "passed": self.passed,
            "note": EVIDENCE_NOTE,
        }


@dataclass(frozen=True)
class SampleSpec:
    """Sampling box: t uniform in [t_min, t_max], x_min <= |x| <= x_max.

    Half the points are uniform in the ball, half have log-uniform radius
    (uniform direction) so that the neighbourhood of the origin is covered.
    """

    t_min: float = 0.0
    t_max: float = 50.0
    x_max: float = 2.0
    n_samples: int = 10_000
    seed: int = 0
    x_min: float = 1e-9

    def __post_init__(self):
        if not self.t_max >= self.t_min:
            raise ValueError("t_max must be >= t_min")
        if not 0 < self.x_min < self.x_max:
            raise ValueError("need 0 < x_min < x_max")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass
class LinearGrowthReport:
    estimated_H: float
    report: ViolationReport | None = None
    declared_H: float | None = None

    @property
    def passed(self) -> bool:
        return self.report is None or self.report.passed

    def to_dict(self) -> dict:
        return {
            "estimated_H": self.estimated_H,
            "declared_H": self.declared_H,
            "report": None if self.report is None else self.report.to_dict(),
            "passed": self.passed,
        }


def draw_samples(spec: SampleSpec, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Return t with shape (n,) and x with shape (r, n)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    n_ball = n // 2
    n_log = n - n_ball
    t = rng.uniform(spec.t_min, spec.t_max, n)

    def directions(m):
        v = rng.standard_normal((r, m))
        return v / np.linalg.norm(v, axis=0)

    # uniform in the ball via radius ~ U^(1/r), trimmed at x_min
    radii = spec.x_max * rng.uniform(0.0, 1.0, n_ball) ** (1.0 / r)
    radii = np.maximum(radii, spec.x_min)
    log_radii = np.exp(rng.uniform(math.log(spec.x_min), math.log(spec.x_max), n_log))
    x = np.concatenate([directions(n_ball) * radii, directions(n_log) * log_radii], axis=1)
    return t, x


def _point(t, x, j) -> dict:
    return {"t": float(np.atleast_1d(t)[j] if np.ndim(t) else t), "x": [float(v) for v in x[:, j]]}


def _report(check: str, magnitude: np.ndarray, tol: float, t, x, scale: str) -> ViolationReport:
    magnitude = np.where(np.isnan(magnitude), np.inf, magnitude)
    j = int(np.argmax(magnitude))
    return ViolationReport(
        check=check,
        n_samples=int(magnitude.size),
        n_violations=int(np.count_nonzero(magnitude > tol)),
        worst_violation=float(magnitude[j]),
        worst_point=_point(t, x, j),
        tolerance=tol,
        scale=scale,
    )


# --- quadrature --------------------------------------------------------------------

def _eval_time(f: Expression, t: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        y = np.broadcast_to(np.asarray(f.compiled(strict=False)(t, ()), dtype=float), t.shape)
    if not np.all(np.isfinite(y)):
        j = int(np.flatnonzero(~np.isfinite(y))[0])
        raise DomainError(f"{f} is not finite at t={t[j]!r}")
    return y


def integrate_time_function(f, t0: float, t1: float, n_panels: int = 1000) -> float:
    """Composite Simpson rule with ``n_panels`` panels (2*n_panels intervals).

    Error is O(n_panels**-4) for smooth integrands; kinks cost accuracy, so
    use a dense grid for integrands like |sin 2t|.
    """
    f = _time_only(f, "integrand")
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if n_panels < 1:
        raise ValueError("n_panels must be >= 1")
    if t1 == t0:
        return 0.0
    t = np.linspace(t0, t1, 2 * n_panels + 1)
    y = _eval_time(f, t)
    h = (t1 - t0) / (2 * n_panels)
    return float(h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum()))


def _cumulative(mu: Expression, t0: float, T: float, n_grid: int):
    m = max(n_grid - 1, math.ceil(2 * PANELS_PER_UNIT_TIME * (T - t0)))
    m += m % 2
    t = np.linspace(t0, T, m + 1)
    integral = cumulative_simpson(_eval_time(mu, t), x=t, initial=0.0)
    return t, integral


def verify_uasf(mu, c: float, d: float, t0: float = 0.0, T: float = 100.0,
                n_grid: int = 2001) -> UasfCertificate:
    """Check int_{t0}^t mu <= d - c (t - t0) on a dense grid over [t0, T]."""
    mu = _time_only(mu, "mu")
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    if not d >= 0:
        raise ValueError(f"d must be non-negative, got {d}")
    if not T > t0:
        raise ValueError("horizon must exceed t0")
    t, integral = _cumulative(mu, t0, T, n_grid)
    residual = float(np.max(integral - (d - c * (t - t0))))
    ok = residual <= UASF_TOLERANCE
    return UasfCertificate(
        mu=mu, c=float(c), d=float(d), t0=t0, horizon=T, n_grid=t.size, max_residual=residual,
        status="verified" if ok else "unverified",
        reason="" if ok else f"integral exceeds d - c(t - t0) by {residual:.3g}",
    )


def fit_uasf(mu, t0: float = 0.0, T: float = 200.0, n_grid: int = 2001,
             c_min: float = 1e-3) -> UasfCertificate:
    """Fit (c, d) for mu on [t0, T].

    c is the average decay rate over the second half of the horizon (floored
    at ``c_min``) and d the smallest value that makes the bound hold on the
    grid. The fit fails when the tail average of mu is not negative enough to
    beat ``c_min``: then no horizon-independent d can exist.
    """
    mu = _time_only(mu, "mu")
    if not T > t0:
        raise ValueError("horizon must exceed t0")
    t, integral = _cumulative(mu, t0, T, n_grid)
    mid = t.size // 2
    tail_rate = -(integral[-1] - integral[mid]) / (t[-1] - t[mid])
    c = max(c_min, float(tail_rate))
    d = max(0.0, float(np.max(integral + c * (t - t0))))
    cert = verify_uasf(mu, c, d, t0, T, n_grid)
    if tail_rate < c_min:
        cert.status = "fit-failed"
        cert.reason = f"tail average of mu is {-tail_rate:.3g}, not below -{c_min}"
    elif not cert.verified:
        cert.status = "fit-failed"
    return cert


# --- generator ---------------------------------------------------------------------

def _eval_v(e: Expression, t, X) -> np.ndarray:
    with np.errstate(all="ignore"):
        y = np.asarray(e.compiled(strict=False)(t, tuple(X)), dtype=float)
    y = np.broadcast_to(y, np.broadcast(np.asarray(t), X[0]).shape)
    if not np.all(np.isfinite(y)):
        j = int(np.flatnonzero(~np.isfinite(np.atleast_1d(y)))[0])
        tt = np.broadcast_to(t, y.shape)
        point = {"t": float(np.atleast_1d(tt)[j]), "x": [float(np.atleast_1d(xi)[j]) for xi in X]}
        raise DomainError(f"{e} is not finite at stencil point {point}")
    return y


def _derivatives(V: LyapunovSpec, t: np.ndarray, X: np.ndarray):
    """V, V_t, V_x (r, n), V_xx (r, r, n) by central differences or supplied expressions."""
    r = X.shape[0]
    v0 = _eval_v(V.V, t, X)
    ht = np.maximum(V.fd_step * np.abs(t), V.fd_floor)
    vt = (_eval_v(V.V, t + ht, X) - _eval_v(V.V, t - ht, X)) / (2 * ht)
    # one step per point, relative to |x|: per-coordinate steps lose the
    # second difference to rounding when coordinates differ in scale
    h = np.broadcast_to(np.maximum(V.fd_step * np.linalg.norm(X, axis=0), V.fd_floor), X.shape)

    def shifted(*moves):
        Y = X.copy()
        for i, sgn in moves:
            Y[i] = Y[i] + sgn * h[i]
        return _eval_v(V.V, t, Y)

    plus = [shifted((i, 1)) for i in range(r)] if (V.grad is None or V.hessian is None) else None
    minus = [shifted((i, -1)) for i in range(r)] if plus is not None else None

    if V.grad is not None:
        vx = np.array([_eval_v(g, t, X) for g in V.grad])
    else:
        vx = np.array([(plus[i] - minus[i]) / (2 * h[i]) for i in range(r)])

    if V.hessian is not None:
        vxx = np.array([[_eval_v(e, t, X) for e in row] for row in V.hessian])
    else:
        vxx = np.empty((r, r) + v0.shape)
        for i in range(r):
            vxx[i, i] = (plus[i] - 2 * v0 + minus[i]) / h[i] ** 2
            for j in range(i + 1, r):
                cross = (shifted((i, 1), (j, 1)) - shifted((i, 1), (j, -1))
                         - shifted((i, -1), (j, 1)) + shifted((i, -1), (j, -1))) / (4 * h[i] * h[j])
                vxx[i, j] = vxx[j, i] = cross
    return v0, vt, vx, vxx


def _generator(system: SdeSystem, V: LyapunovSpec, t, X):
    """Return (V, LV, V_x g) at the sample points; V_x g has shape (d, n)."""
    v0, vt, vx, vxx = _derivatives(V, t, X)
    f = system.drift_at(t, X)
    g = system.diffusion_at(t, X)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise DomainError(f"coefficients of {system.name} are not finite on the sample")
    ggt = np.einsum("ikn,jkn->ijn", g, g)
    lv = vt + np.einsum("in,in->n", vx, f) + 0.5 * np.einsum("ijn,ijn->n", vxx, ggt)
    vxg = np.einsum("in,ikn->kn", vx, g)
    return v0, lv, vxg


def generator_value(system: SdeSystem, V: LyapunovSpec, t, x):
    """L V = V_t + V_x f + 1/2 Tr(g^T V_xx g) at (t, x).

    ``x`` may be a single state (shape (r,)) or a batch (shape (r, n)) with
    ``t`` scalar or of shape (n,).
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if single:
        X = X.reshape(-1, 1)
    if X.shape[0] != system.r:
        raise ValueError(f"state has {X.shape[0]} coordinates, system has r={system.r}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), X.shape[1:]).copy()
    _, lv, _ = _generator(system, V, t_arr, X)
    return float(lv[0]) if single else lv


# --- checks --------------------------------------------------------------------------

def check_envelope(V: LyapunovSpec, gamma_low: PowerClassK, gamma_high: PowerClassK,
                   sample: SampleSpec, r: int = 1, tolerance: float = 1e-10) -> ViolationReport:
    """gamma_low(|x|) <= V(t, x) <= gamma_high(|x|), relative tolerance."""
    if isinstance(V, (str, Expression)):
        V = LyapunovSpec(V)
    r = max(r, V.V.max_index)
    t, X = draw_samples(sample, r)
    v = _eval_v(V.V, t, X)
    s = np.linalg.norm(X, axis=0)
    lo, hi = gamma_low(s), gamma_high(s)
    scale = np.maximum.reduce([np.abs(v), lo, hi, np.full_like(v, 1e-300)])
    magnitude = np.maximum(lo - v, v - hi) / scale
    return _report("envelope", magnitude, tolerance, t, X, "relative to max(|V|, gamma)")


def check_fts_condition(system: SdeSystem, V: LyapunovSpec, mu, sample: SampleSpec,
                        tolerance: float = 1e-7) -> ViolationReport:
    """L V <= mu(t) V^kappa (L V <= mu(t) when kappa = 0), scaled by 1 + |mu V^kappa|."""
    mu = _time_only(mu, "mu")
    t, X = draw_samples(sample, system.r)
    v, lv, _ = _generator(system, V, t, X)
    rhs = _eval_time(mu, t) * np.maximum(v, 0.0) ** V.kappa
    magnitude = (lv - rhs) / (1 + np.abs(rhs))
    return _report("fts", magnitude, tolerance, t, X, "1 + |mu V^kappa|")


def check_instability_conditions(system: SdeSystem, V: LyapunovSpec, mu, a, a_integral_bound: float,
                                 sample: SampleSpec, n_panels: int | None = None) -> dict:
    """Equality L V = mu V, |V_x g|^2 <= a V^2, a >= 0 and int a <= bound on [t_min, t_max]."""
    mu = _time_only(mu, "mu")
    a = _time_only(a, "a")
    t, X = draw_samples(sample, system.r)
    v, lv, vxg = _generator(system, V, t, X)
    muv = _eval_time(mu, t) * v
    a_t = _eval_time(a, t)
    reports = {
        "equality": _report("instability_equality", np.abs(lv - muv) / (1 + np.abs(muv)), 1e-6, t, X,
                            "1 + |mu V|"),
        "diffusion_bound": _report("instability_diffusion", np.sum(vxg**2, axis=0) - a_t * v**2, 1e-10, t, X,
                                   "absolute"),
        "a_nonnegative": _report("instability_a_nonnegative", -a_t, 0.0, t, X, "absolute"),
    }
    if n_panels is None:
        n_panels = max(1000, math.ceil(PANELS_PER_UNIT_TIME * (sample.t_max - sample.t_min)))
    integral = integrate_time_function(a, sample.t_min, sample.t_max, n_panels)
    reports["a_integral"] = ViolationReport(
        check="instability_a_integral", n_samples=1,
        n_violations=int(integral - a_integral_bound > 1e-8),
        worst_violation=integral - a_integral_bound,
        worst_point={"t": sample.t_max, "x": [], "integral": integral},
        tolerance=1e-8, scale="absolute",
    )
    return reports


def check_linear_growth(system: SdeSystem, sample: SampleSpec, H: float | None = None,
                        tolerance: float = 1e-10) -> LinearGrowthReport:
    """Estimate max (|f|^2 + ||g||^2) / (1 + |x|^2); compare with a declared H."""
    t, X = draw_samples(sample, system.r)
    f = system.drift_at(t, X)
    g = system.diffusion_at(t, X)
    ratio = (np.sum(f**2, axis=0) + np.sum(g**2, axis=(0, 1))) / (1 + np.sum(X**2, axis=0))
    out = LinearGrowthReport(estimated_H=float(np.max(ratio)), declared_H=H)
    if H is not None:
        out.report = _report("linear_growth", (ratio - H) / max(H, 1e-300), tolerance, t, X,
                             "relative to H")
    return out


def check_lemma23(system: SdeSystem, U: LyapunovSpec, l, d_U: float, gamma: PowerClassK,
                  sample: SampleSpec, tolerance: float = 1e-7) -> dict:
    """gamma(|x|) <= U and L U <= l(t) U + d_U."""
    if d_U < 0:
        raise ValueError("d_U must be non-negative")
    l = _time_only(l, "l")
    t, X = draw_samples(sample, system.r)
    u, lu, _ = _generator(system, U, t, X)
    s = np.linalg.norm(X, axis=0)
    low = gamma(s)
    rhs = _eval_time(l, t) * u + d_U
    return {
        "lower_bound": _report("lemma23_lower_bound", (low - u) / np.maximum(np.maximum(np.abs(u), low), 1e-300),
                               1e-10, t, X, "relative to max(U, gamma)"),
        "generator": _report("lemma23_generator", (lu - rhs) / (1 + np.abs(rhs)), tolerance, t, X,
                             "1 + |l U + d_U|"),
    }


# --- closed-form conclusions -----------------------------------------------------------

def settling_bound(cert: UasfCertificate, kappa: float, gamma_high: PowerClassK, x0_norm: float,
                   t0: float = 0.0) -> float:
    """E[settling time] <= t0 + d/c + gamma_high(|x0|)^(1-kappa) / (c (1-kappa))."""
    if not cert.verified:
        raise ValueError(f"UASF certificate is not verified ({cert.status}: {cert.reason})")
    if not 0.0 <= kappa < 1.0:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    c, d = cert.c, cert.d
    return t0 + d / c + gamma_high(x0_norm) ** (1 - kappa) / (c * (1 - kappa))


def stability_delta(eps: float, R: float, kappa: float, gamma_low: PowerClassK,
                    gamma_high: PowerClassK, d_mu: float) -> float | None:
    """Initial radius delta(eps, R) for P{|x(t)| < R for all t} >= 1 - eps.

    Returns None when eps * gamma_low(R)^(1-kappa) <= d_mu (1 - kappa): the
    bound is vacuous there.
    """
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if not 0.0 <= kappa < 1.0:
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    inner = eps * gamma_low(R) ** (1 - kappa) - d_mu * (1 - kappa)
    if inner <= 0:
        return None
    return gamma_high.inverse(inner ** (1 / (1 - kappa)))
