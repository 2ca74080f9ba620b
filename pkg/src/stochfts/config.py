"""Run configuration: a single JSON document validated with pydantic.

Numeric fields also accept constant expression text such as ``"2/3"``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from .expr import ExpressionError, evaluate, parse
from .systems import BUILTIN_NAMES, SdeSystem, builtin_system

__all__ = ["RunConfig", "ConfigError", "load_config", "CHECK_NAMES"]

CHECK_NAMES = ("envelope", "fts", "instability", "linear_growth", "lemma23")


class ConfigError(ValueError):
    pass


def _constant(value: Any) -> Any:
    if isinstance(value, str):
        try:
            e = parse(value)
        except ExpressionError as exc:
            raise ValueError(str(exc)) from None
        if e.variables:
            raise ValueError(f"expected a constant, {value!r} depends on {sorted(e.variables)}")
        return float(evaluate(e, 0.0))
    return value


def _expression(value: Any) -> str:
    if not isinstance(value, str):
        raise ValueError("expected expression text")
    try:
        parse(value)
    except ExpressionError as exc:
        raise ValueError(str(exc)) from None
    return value


def _time_expression(value: Any) -> str:
    _expression(value)
    if not parse(value).is_time_only:
        raise ValueError(f"{value!r} must depend on t only")
    return value


Num = Annotated[float, BeforeValidator(_constant)]
Expr = Annotated[str, BeforeValidator(_expression)]
TimeExpr = Annotated[str, BeforeValidator(_time_expression)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BuiltinSystem(_Section):
    builtin: Literal[BUILTIN_NAMES]
    params: dict[str, Num] = Field(default_factory=dict)


class CustomSystem(_Section):
    dim: int = Field(ge=1)
    noise_dim: int = Field(ge=1)
    drift: list[Expr]
    diffusion: list[list[Expr]]
    assumed_unique: bool = False
    name: str = "custom"


class PowerK(_Section):
    a: Num = Field(gt=0)
    p: Num = Field(gt=0)


class LyapunovSection(_Section):
    v: Expr
    kappa: Num = Field(default=0.0, ge=0.0, lt=1.0)
    gamma_low: PowerK | None = None
    gamma_high: PowerK | None = None
    fd_step: Num = Field(default=1e-4, gt=0)
    grad: list[Expr] | None = None
    hessian: list[list[Expr]] | None = None


class UasfSection(_Section):
    c: Num = Field(gt=0)
    d: Num = Field(ge=0)
    horizon: Num = 100.0
    n_grid: int = Field(default=2001, ge=2)


class InstabilitySection(_Section):
    a_expr: TimeExpr
    a_integral_bound: Num


class SimSection(_Section):
    x0: list[Num]
    dt: Num = Field(default=1e-3, gt=0)
    t0: Num = 0.0
    t_end: Union[Num, Literal["auto"]] = 30.0
    paths: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    absorption_radius: Num = Field(default=1e-3, gt=0)
    record_stride: int = Field(default=1, ge=1)
    record_paths: int = Field(default=1, ge=0)
    auto_factor: Num = Field(default=1.5, gt=0)


class SampleSection(_Section):
    t_min: Num = 0.0
    t_max: Num = 50.0
    x_max: Num = Field(default=2.0, gt=0)
    n_samples: int = Field(default=10_000, ge=1)
    seed: int = Field(default=0, ge=0)
    origin_exclusion_radius: Num = Field(default=1e-9, gt=0)


class LinearGrowthCheck(_Section):
    H: Num | None = None
    sample: SampleSection | None = None


class GeneratorGrowthCheck(_Section):
    l: TimeExpr
    d_U: Num = Field(ge=0)
    u: Expr | None = None
    gamma: PowerK | None = None


class DeltaSection(_Section):
    eps: Num = Field(gt=0, lt=1)
    R: Num = Field(gt=0)


class EstimateSection(_Section):
    containment_radius: Num | None = Field(default=None, gt=0)
    nonattraction_eps: Num | None = Field(default=None, gt=0)
    delta: DeltaSection | None = None


CheckEntry = Union[
    Literal["envelope", "fts", "instability", "linear_growth"],
    dict[Literal["linear_growth"], LinearGrowthCheck],
    dict[Literal["lemma23"], GeneratorGrowthCheck],
]


class RunConfig(_Section):
    name: str = "run"
    system: Union[BuiltinSystem, CustomSystem]
    lyapunov: LyapunovSection | None = None
    mu: TimeExpr | None = None
    uasf: Union[UasfSection, Literal["fit"], None] = None
    instability: InstabilitySection | None = None
    sim: SimSection | None = None
    sample: SampleSection = Field(default_factory=SampleSection)
    checks: list[CheckEntry] = Field(default_factory=list)
    estimate: EstimateSection = Field(default_factory=EstimateSection)

    @field_validator("checks")
    @classmethod
    def _single_key(cls, checks):
        for entry in checks:
            if isinstance(entry, dict) and len(entry) != 1:
                raise ValueError("each parameterised check is a single-key object")
        return checks

    @model_validator(mode="after")
    def _consistent(self):
        system = self.build_system()
        for name, options in self.iter_checks():
            borrows_v = name in ("envelope", "fts", "instability") or (name == "lemma23" and options.u is None)
            if borrows_v and self.lyapunov is None:
                raise ValueError(f"check {name!r} requires a lyapunov section")
            if name == "lemma23" and options.gamma is None and (self.lyapunov is None or self.lyapunov.gamma_low is None):
                raise ValueError("check 'lemma23' needs gamma or lyapunov.gamma_low")
            if name in ("fts", "instability") and self.mu is None:
                raise ValueError(f"check {name!r} requires mu")
            if name == "instability" and self.instability is None:
                raise ValueError("check 'instability' requires an instability section")
            if name == "envelope" and (self.lyapunov.gamma_low is None or self.lyapunov.gamma_high is None):
                raise ValueError("check 'envelope' requires lyapunov.gamma_low and lyapunov.gamma_high")
        if self.uasf is not None and self.mu is None:
            raise ValueError("uasf section requires mu")
        if self.lyapunov is not None:
            if parse(self.lyapunov.v).max_index > system.r:
                raise ValueError(f"lyapunov.v references coordinates beyond dim {system.r}")
            if self.lyapunov.grad is not None and len(self.lyapunov.grad) != system.r:
                raise ValueError(f"lyapunov.grad needs {system.r} entries")
            if self.lyapunov.hessian is not None and (
                len(self.lyapunov.hessian) != system.r or any(len(row) != system.r for row in self.lyapunov.hessian)
            ):
                raise ValueError(f"lyapunov.hessian must be {system.r}x{system.r}")
        if self.sim is not None and len(self.sim.x0) != system.r:
            raise ValueError(f"sim.x0 has {len(self.sim.x0)} entries, system has dim {system.r}")
        if self.sample.origin_exclusion_radius >= self.sample.x_max:
            raise ValueError("sample.origin_exclusion_radius must be below sample.x_max")
        if self.sample.t_max < self.sample.t_min:
            raise ValueError("sample.t_max must be >= sample.t_min")
        return self

    def iter_checks(self):
        """Yield (name, options) in declared order."""
        for entry in self.checks:
            if isinstance(entry, str):
                yield entry, (LinearGrowthCheck() if entry == "linear_growth" else None)
            else:
                (name, options), = entry.items()
                yield name, options

    def build_system(self) -> SdeSystem:
        s = self.system
        if isinstance(s, BuiltinSystem):
            params = {k: (int(v) if k == "l" else v) for k, v in s.params.items()}
            try:
                return builtin_system(s.builtin, params)
            except ValueError as exc:
                raise ValueError(f"system: {exc}") from None
        try:
            return SdeSystem(s.name, s.dim, s.noise_dim, s.drift, s.diffusion, s.assumed_unique)
        except (ValueError, ExpressionError) as exc:
            raise ValueError(f"system: {exc}") from None

    def echo(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def load_config(source: str | Path | dict) -> RunConfig:
    """Validate a config from a path, JSON text or an already-decoded dict."""
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None
