"""Ito systems dx = f(t, x) dt + g(t, x) dW and the built-in examples.

Built-ins:

* ``example1``: scalar system with a time-varying Hoelder drift,
  f = 0.5*mu1(t)*spow(x, 1/3) - 0.5*x, g = x*cos(x),
  mu1(t) = 2/(1+t) - |sin 2t|.
* ``example2``: two states with diagonal noise,
  f_i = -x_i + (psi(t) - 0.5)*spow(x_i, 4/5), psi(t) = t*sin(t)/(1+t).
* ``example3``: state (chi, x1, x2) closed with the backstepping controller
  from :func:`controller_u`; the controller is baked into the drift.
* ``instability1``: geometric-Brownian-type system with L(x^2) = mu*x^2 and
  |V_x g|^2 = 4 e^{-2t} V^2, i.e. exactly on the instability conditions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .expr import Expression, parse, signed_pow

__all__ = [
    "SdeSystem",
    "ControllerGains",
    "BUILTIN_NAMES",
    "builtin_system",
    "controller_gains",
    "controller_u",
    "signed_pow",
]

BUILTIN_NAMES = ("example1", "example2", "example3", "instability1")

MU1 = "2/(1+t) - abs(sin(2*t))"
PSI = "t*sin(t)/(1+t)"
PHI = "0.5*(t*cos(t)/(1+t) - 1.5)"


def _as_expr(e) -> Expression:
    return e if isinstance(e, Expression) else parse(str(e))


@dataclass(frozen=True)
class SdeSystem:
    name: str
    r: int
    d: int
    drift: tuple
    diffusion: tuple
    assumed_unique: bool = False
    _fns: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        drift = tuple(_as_expr(e) for e in self.drift)
        diffusion = tuple(tuple(_as_expr(e) for e in row) for row in self.diffusion)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "diffusion", diffusion)
        if self.r < 1 or self.d < 1:
            raise ValueError("state and noise dimensions must be positive")
        if len(drift) != self.r:
            raise ValueError(f"drift has {len(drift)} entries, expected r={self.r}")
        if len(diffusion) != self.r or any(len(row) != self.d for row in diffusion):
            raise ValueError(f"diffusion must be a {self.r}x{self.d} matrix")
        for e in drift + tuple(e for row in diffusion for e in row):
            if e.max_index > self.r:
                raise ValueError(f"{e} references x{e.max_index} but r={self.r}")

    def __getstate__(self):
        return {k: getattr(self, k) for k in ("name", "r", "d", "drift", "diffusion", "assumed_unique")}

    def __setstate__(self, state):
        for k, v in state.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_fns", ())

    def _compiled(self, strict: bool):
        fns = dict(self._fns)
        if strict not in fns:
            fns[strict] = (
                [e.compiled(strict) for e in self.drift],
                [[e.compiled(strict) for e in row] for row in self.diffusion],
            )
            object.__setattr__(self, "_fns", tuple(fns.items()))
        return fns[strict]

    def drift_at(self, t, x, strict: bool = True) -> np.ndarray:
        """f(t, x) with shape (r,) for a single state or (r, n) for x of shape (r, n)."""
        x = np.asarray(x, dtype=float)
        coords = tuple(x)
        f, _ = self._compiled(strict)
        out = np.empty(x.shape)
        with np.errstate(all="ignore"):
            for i, fi in enumerate(f):
                out[i] = fi(t, coords)
        return out

    def diffusion_at(self, t, x, strict: bool = True) -> np.ndarray:
        """g(t, x) with shape (r, d) or (r, d, n)."""
        x = np.asarray(x, dtype=float)
        coords = tuple(x)
        _, g = self._compiled(strict)
        out = np.empty((self.r, self.d) + x.shape[1:])
        with np.errstate(all="ignore"):
            for i, row in enumerate(g):
                for k, gik in enumerate(row):
                    out[i, k] = gik(t, coords)
        return out

    def vanishes_at_origin(self, times: Sequence[float] | None = None, tol: float = 1e-12) -> bool:
        """True when |f(t, 0)| and |g(t, 0)| stay within ``tol`` at the sampled times."""
        if times is None:
            times = np.linspace(0.0, 100.0, 100)
        zero = np.zeros(self.r)
        for t in times:
            if np.max(np.abs(self.drift_at(t, zero))) > tol:
                return False
            if np.max(np.abs(self.diffusion_at(t, zero))) > tol:
                return False
        return True


@dataclass(frozen=True)
class ControllerGains:
    l: int
    c1: float
    c2: float
    lam: float
    beta1: float
    beta2: float
    beta3: float
    h1: float
    h2: float
    h3: float
    d1: float
    d2: float
    d1_tilde: float
    d2_tilde: float


def controller_gains(l: int, c1: float, c2: float | None = None) -> ControllerGains:
    """Backstepping gains for the closed-loop third example.

    ``c2`` defaults to ``c1``. The h-choices make d1_tilde + 2^(1-lam)*h3/(1+lam)
    equal c1/2; that identity is asserted to 1e-10.
    """
    if int(l) != l or l < 2:
        raise ValueError(f"l must be an integer >= 2, got {l}")
    if not c1 > 0:
        raise ValueError(f"c1 must be positive, got {c1}")
    c2 = c1 if c2 is None else c2
    if not c2 > 0:
        raise ValueError(f"c2 must be positive, got {c2}")
    l = int(l)
    lam = (2 * l - 1) / (2 * l + 1)
    beta2 = 2 * l / (2 * l + 1)
    beta3 = (2 * l - 2) / (2 * l - 1)

    h1 = (1 + lam) * 2 ** (lam - 1) * c1 ** (-1 / lam) / (6 * lam * (2 - lam))
    h2 = (1 + lam) / c1 / (12 * (2 - lam))
    h3 = 2**lam * c1 * (1 + lam) / 12
    d2_tilde = (
        (2 - lam) * 2 ** (1 - lam) * c1 ** (1 + 1 / lam) * h1 ** (-lam) / (1 + lam)
        + (2 - lam) * c1 ** (1 / lam) * 2 ** (2 * (1 - lam))
        + (1 - lam) * (2 - lam) * c1**2 * h2 ** (-2 * lam / (1 - lam)) / (lam * (1 + lam))
        + (2 - lam) / lam
    )
    d2 = d2_tilde + 2 ** (1 - lam) * lam * h3 ** (-1 / lam) / (1 + lam)
    d1_tilde = (
        2 ** (1 - lam) * (2 - lam) * c1 ** (1 + 1 / lam) * h1 * lam / (1 + lam)
        + 2 * (2 - lam) * c1**2 * h2 / (1 + lam)
    )
    residual = d1_tilde + 2 ** (1 - lam) * h3 / (1 + lam) - c1 / 2
    assert abs(residual) <= 1e-10, f"gain identity off by {residual}"
    return ControllerGains(
        l=l, c1=float(c1), c2=float(c2), lam=lam, beta1=lam, beta2=beta2, beta3=beta3,
        h1=h1, h2=h2, h3=h3, d1=c1 / 2, d2=d2, d1_tilde=d1_tilde, d2_tilde=d2_tilde,
    )


def controller_u(gains: ControllerGains, x1, x2):
    """u = -(d2 + c2/2) * spow(z2, 2*lam - 1) with z2 = spow(x2, 1/lam) - spow(alpha, 1/lam)."""
    lam = gains.lam
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    alpha = -gains.c1 * np.sign(x1) * np.abs(x1) ** lam
    z2 = np.sign(x2) * np.abs(x2) ** (1 / lam) - np.sign(alpha) * np.abs(alpha) ** (1 / lam)
    u = -(gains.d2 + 0.5 * gains.c2) * np.sign(z2) * np.abs(z2) ** (2 * lam - 1)
    return float(u) if u.ndim == 0 else u


def _controller_source(g: ControllerGains, x1: str, x2: str) -> str:
    inv = 1 / g.lam
    alpha = f"(-{g.c1!r}*spow({x1}, {g.lam!r}))"
    z2 = f"(spow({x2}, {inv!r}) - spow({alpha}, {inv!r}))"
    return f"-{g.d2 + 0.5 * g.c2!r}*spow({z2}, {2 * g.lam - 1!r})"


def builtin_system(name: str, params: Mapping | None = None) -> SdeSystem:
    params = dict(params or {})
    if name == "example1":
        _no_params(name, params)
        return SdeSystem(
            name, 1, 1,
            drift=[f"0.5*({MU1})*spow(x1, 1/3) - 0.5*x1"],
            diffusion=[["x1*cos(x1)"]],
        )
    if name == "example2":
        _no_params(name, params)
        return SdeSystem(
            name, 2, 2,
            drift=[f"-x1 + ({PSI} - 0.5)*spow(x1, 4/5)", f"-x2 + ({PSI} - 0.5)*spow(x2, 4/5)"],
            diffusion=[["sqrt(2)*x2*cos(x1)", "0"], ["0", "sqrt(2)*x1*sin(x2)"]],
        )
    if name == "example3":
        unknown = set(params) - {"l", "c1", "c2"}
        if unknown:
            raise ValueError(f"unknown parameters for example3: {sorted(unknown)}")
        try:
            l, c1, c2 = params["l"], params["c1"], params["c2"]
        except KeyError as exc:
            raise ValueError(f"example3 requires parameter {exc.args[0]!r}") from None
        g = controller_gains(l, float(c1), float(c2))
        # state (chi, x1, x2) maps to expression variables (x1, x2, x3)
        return SdeSystem(
            name, 3, 2,
            drift=[f"({PHI})*spow(x1, {g.beta1!r})", "x3", _controller_source(g, "x2", "x3")],
            diffusion=[
                [f"cos(x2)*spow(x1, {g.beta2!r})", "0"],
                ["0", "0"],
                ["0", f"spow(x3, {g.beta3!r})*sin(x1)"],
            ],
        )
    if name == "instability1":
        unknown = set(params) - {"mu"}
        if unknown:
            raise ValueError(f"unknown parameters for instability1: {sorted(unknown)}")
        mu = float(params.get("mu", -0.1))
        if not mu < 0:
            raise ValueError(f"instability1 needs a negative constant mu, got {mu}")
        return SdeSystem(
            name, 1, 1,
            drift=[f"0.5*({mu!r} - exp(-2*t))*x1"],
            diffusion=[["exp(-t)*x1"]],
        )
    raise ValueError(f"unknown built-in system {name!r}; expected one of {BUILTIN_NAMES}")


def _no_params(name, params):
    if params:
        raise ValueError(f"{name} takes no parameters, got {sorted(params)}")
