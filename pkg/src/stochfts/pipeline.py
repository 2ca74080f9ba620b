"""Config-driven runs producing a :class:`StabilityReport` and CSV artifacts."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .certify import (
    EVIDENCE_NOTE,
    LyapunovSpec,
    PowerClassK,
    SampleSpec,
    check_envelope,
    check_fts_condition,
    check_instability_conditions,
    check_lemma23,
    check_linear_growth,
    fit_uasf,
    settling_bound,
    stability_delta,
    verify_uasf,
)
from .config import ConfigError, RunConfig, load_config
from .estimate import (
    FAIL,
    PASS,
    bound_check,
    containment_probability,
    nonattraction_fraction,
    settling_statistics,
)
from .expr import ExpressionError
from .simulate import SimConfig, SimulationError, simulate_ensemble
from .systems import BUILTIN_NAMES, controller_gains, controller_u

__all__ = [
    "StabilityReport",
    "run_certify",
    "run_simulate",
    "run_reproduce",
    "canonical_config",
    "EXIT_OK",
    "EXIT_VIOLATION",
    "EXIT_ERROR",
]

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
FIT_HORIZON = 200.0
FIT_GRID = 2001
MAX_BLOWUP_FRACTION = 0.10
MAX_NONATTRACTION = 0.01
MIN_CONTAINMENT = 0.95


@dataclass
class StabilityReport:
    body: dict
    timing: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.errors:
            return EXIT_ERROR
        return EXIT_VIOLATION if self.failures else EXIT_OK

    def finalize(self) -> "StabilityReport":
        status = "ERROR" if self.errors else ("FAIL" if self.failures else "PASS")
        self.body["verdict"] = {
            "status": status,
            "exit_code": self.exit_code,
            "failures": list(self.failures),
            "errors": list(self.errors),
        }
        return self

    def to_json(self) -> str:
        return json.dumps(_jsonable({**self.body, "timing": self.timing}), sort_keys=True, indent=2) + "\n"

    def body_json(self) -> str:
        """Report without wall-clock fields; identical across re-runs of the same config."""
        return json.dumps(_jsonable(self.body), sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def config_hash(echo: dict) -> str:
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def canonical_config(name: str) -> dict:
    """The shipped config for a built-in example, as a dict."""
    if name not in BUILTIN_NAMES:
        raise ConfigError(f"unknown example {name!r}; expected one of {', '.join(BUILTIN_NAMES)}")
    text = resources.files("stochfts").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def apply_overrides(config: RunConfig, seed: int | None = None, paths: int | None = None) -> RunConfig:
    """Return a new config with seeds and/or path count replaced."""
    if seed is None and paths is None:
        return config
    data = config.echo()
    if seed is not None:
        data.setdefault("sample", {})["seed"] = seed
        if "sim" in data:
            data["sim"]["seed"] = seed
    if paths is not None:
        if "sim" not in data:
            raise ConfigError("--paths given but the config has no sim section")
        data["sim"]["paths"] = paths
    return load_config(data)


# --- stages ------------------------------------------------------------------------

class _Run:
    def __init__(self, config: RunConfig):
        self.config = config
        self.system = config.build_system()
        echo = config.echo()
        self.report = StabilityReport(body={
            "tool": {"name": "stochfts", "version": __version__},
            "config": echo,
            "config_hash": config_hash(echo),
            "system": {"name": self.system.name, "dim": self.system.r, "noise_dim": self.system.d,
                       "assumed_unique": self.system.assumed_unique},
        })
        self.cert = None
        self.bound = None

    def _timed(self, key, fn):
        start = time.perf_counter()
        try:
            return fn()
        finally:
            self.report.timing[key] = time.perf_counter() - start

    def lyapunov(self, v=None) -> LyapunovSpec:
        ly = self.config.lyapunov
        if v is not None:
            return LyapunovSpec(v, fd_step=ly.fd_step if ly else 1e-4)
        return LyapunovSpec(ly.v, kappa=ly.kappa, fd_step=ly.fd_step, grad=ly.grad, hessian=ly.hessian)

    def sample(self, section=None) -> SampleSpec:
        s = section or self.config.sample
        return SampleSpec(s.t_min, s.t_max, s.x_max, s.n_samples, s.seed, s.origin_exclusion_radius)

    def checks(self):
        results = {}
        for i, (name, options) in enumerate(self.config.iter_checks()):
            key = name if name not in results else f"{name}_{i}"
            try:
                out = self._timed(f"check.{key}", lambda: self._check(name, options))
            except (ExpressionError, ValueError) as exc:
                self.report.errors.append(f"check {key}: {exc}")
                results[key] = {"error": str(exc)}
                continue
            results[key] = out
            if not _passed(out):
                self.report.failures.append(f"check {key} reported violations")
        self.report.body["checks"] = _jsonable(_to_dicts(results))
        self.report.body["evidence"] = EVIDENCE_NOTE

    def _check(self, name, options):
        cfg = self.config
        ly = cfg.lyapunov
        if name == "envelope":
            return check_envelope(self.lyapunov(), PowerClassK(**ly.gamma_low.model_dump()),
                                  PowerClassK(**ly.gamma_high.model_dump()), self.sample(), r=self.system.r)
        if name == "fts":
            return check_fts_condition(self.system, self.lyapunov(), cfg.mu, self.sample())
        if name == "instability":
            inst = cfg.instability
            return check_instability_conditions(self.system, self.lyapunov(), cfg.mu, inst.a_expr,
                                                inst.a_integral_bound, self.sample())
        if name == "linear_growth":
            return check_linear_growth(self.system, self.sample(options.sample), options.H)
        if name == "lemma23":
            gamma = options.gamma or ly.gamma_low
            U = self.lyapunov(options.u) if options.u is not None else self.lyapunov(ly.v)
            return check_lemma23(self.system, U, options.l, options.d_U,
                                 PowerClassK(**gamma.model_dump()), self.sample())
        raise ValueError(f"unknown check {name!r}")

    def uasf(self):
        cfg = self.config
        if cfg.uasf is None:
            return
        t0 = cfg.sim.t0 if cfg.sim else 0.0
        try:
            if cfg.uasf == "fit":
                cert = self._timed("uasf", lambda: fit_uasf(cfg.mu, t0, t0 + FIT_HORIZON, FIT_GRID))
            else:
                u = cfg.uasf
                cert = self._timed("uasf", lambda: verify_uasf(cfg.mu, u.c, u.d, t0, t0 + u.horizon, u.n_grid))
        except (ExpressionError, ValueError) as exc:
            self.report.errors.append(f"uasf: {exc}")
            self.report.body["uasf"] = {"error": str(exc)}
            return
        self.report.body["uasf"] = cert.to_dict()
        if cert.verified:
            self.cert = cert
        else:
            self.report.failures.append(f"uasf certificate {cert.status}: max residual {cert.max_residual:.3g}")

    def bounds(self):
        cfg, ly = self.config, self.config.lyapunov
        if self.cert is None or ly is None:
            return
        if ly.gamma_high is not None and cfg.sim is not None:
            x0_norm = float(np.linalg.norm(cfg.sim.x0))
            self.bound = settling_bound(self.cert, ly.kappa, PowerClassK(**ly.gamma_high.model_dump()),
                                        x0_norm, cfg.sim.t0)
            self.report.body["settling_bound"] = {
                "value": self.bound, "kappa": ly.kappa, "x0_norm": x0_norm, "t0": cfg.sim.t0,
            }
        delta = cfg.estimate.delta
        if delta is not None and ly.gamma_low is not None and ly.gamma_high is not None:
            value = stability_delta(delta.eps, delta.R, ly.kappa, PowerClassK(**ly.gamma_low.model_dump()),
                                    PowerClassK(**ly.gamma_high.model_dump()), self.cert.d)
            self.report.body["stability_delta"] = {
                "eps": delta.eps, "R": delta.R, "value": "undefined" if value is None else value,
            }

    def sim_config(self) -> SimConfig:
        s = self.config.sim
        if s.t_end == "auto":
            if self.bound is None:
                raise ConfigError("sim.t_end 'auto' needs a verified uasf certificate and lyapunov.gamma_high")
            t_end = s.t0 + s.auto_factor * (self.bound - s.t0)
        else:
            t_end = s.t_end
        stride = s.record_stride
        if self.config.estimate.nonattraction_eps is not None and stride != 1:
            stride = 1
            self.report.body.setdefault("notes", []).append("record_stride forced to 1 for a non-attraction run")
        try:
            return SimConfig(dt=s.dt, t0=s.t0, t_end=t_end, n_paths=s.paths, master_seed=s.seed,
                             absorption_radius=s.absorption_radius, record_stride=stride,
                             record_paths=s.record_paths)
        except SimulationError as exc:
            raise ConfigError(f"sim: {exc}") from None

    def simulate(self, out_dir: Path | None, workers: int = 1):
        cfg = self.config
        if cfg.sim is None:
            raise ConfigError("config has no sim section")
        sim_cfg = self.sim_config()
        ens = self._timed("simulate", lambda: simulate_ensemble(self.system, cfg.sim.x0, sim_cfg, workers=workers))
        body = self.report.body
        body["simulation"] = {**ens.config_echo(), "x0": list(ens.x0), "scheme": "euler-maruyama",
                              "blowup_fraction": ens.blowup_fraction}
        stats = settling_statistics(ens)
        body["settling"] = stats.to_dict()
        if ens.blowup_fraction > MAX_BLOWUP_FRACTION:
            self.report.failures.append(f"blow-up fraction {ens.blowup_fraction:.3f} exceeds {MAX_BLOWUP_FRACTION}")
        if self.bound is not None:
            verdict = bound_check(stats, self.bound)
            body["bound_check"] = verdict.to_dict()
            if verdict.verdict != PASS:
                self.report.failures.append(f"bound_check {verdict.verdict}")
        est = cfg.estimate
        if est.containment_radius is not None:
            cp = containment_probability(ens, est.containment_radius)
            ok = cp.estimate >= MIN_CONTAINMENT
            body["containment"] = {**cp.to_dict(), "required": MIN_CONTAINMENT, "verdict": PASS if ok else FAIL}
            if not ok:
                self.report.failures.append(f"containment {cp.estimate:.3f} below {MIN_CONTAINMENT}")
        if est.nonattraction_eps is not None:
            na = nonattraction_fraction(ens, est.nonattraction_eps)
            ok = na.estimate <= MAX_NONATTRACTION
            body["nonattraction"] = {**na.to_dict(), "allowed": MAX_NONATTRACTION, "verdict": PASS if ok else FAIL}
            if not ok:
                self.report.failures.append(f"nonattraction fraction {na.estimate:.3f} above {MAX_NONATTRACTION}")
        if out_dir is not None:
            self._timed("write", lambda: self._write_csv(ens, out_dir))
        return ens

    def _write_csv(self, ens, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        r = self.system.r
        control = self._control()
        header = ["t", "path"] + [f"x{i + 1}" for i in range(r)] + (["u"] if control else [])
        with open(out_dir / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for tr in ens.trajectories:
                if tr.states is None:
                    continue
                u = control(tr.states) if control else None
                for k, t in enumerate(tr.times):
                    row = [repr(float(t)), tr.path_index] + [repr(float(v)) for v in tr.states[k]]
                    if u is not None:
                        row.append(repr(float(u[k])))
                    w.writerow(row)
        with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["path", "settling_time", "sup_norm", "min_norm", "absorbed", "blowup"])
            w.writeheader()
            w.writerows(ens.summary_rows())

    def _control(self):
        s = self.config.system
        if getattr(s, "builtin", None) != "example3":
            return None
        gains = controller_gains(int(s.params["l"]), s.params["c1"], s.params["c2"])
        return lambda states: np.atleast_1d(controller_u(gains, states[:, 1], states[:, 2]))


def _to_dicts(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {k: _to_dicts(v) for k, v in obj.items()}
    return obj


def _passed(out) -> bool:
    if isinstance(out, dict):
        return all(_passed(v) for v in out.values())
    return out.passed


def _load(config) -> RunConfig:
    return config if isinstance(config, RunConfig) else load_config(config)


def _guard(run_fn):
    """Turn operational errors into an error report instead of a traceback."""
    def wrapper(config, *args, **kwargs):
        try:
            return run_fn(config, *args, **kwargs)
        except (ConfigError, ExpressionError, SimulationError, OSError) as exc:
            report = StabilityReport(body={"tool": {"name": "stochfts", "version": __version__}})
            report.errors.append(str(exc))
            return report.finalize()
    wrapper.__name__ = run_fn.__name__
    wrapper.__doc__ = run_fn.__doc__
    return wrapper


def _write_report(report: StabilityReport, out_dir: Path | None):
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")


@_guard
def run_certify(config, out_dir: Path | None = None, seed: int | None = None) -> StabilityReport:
    """Run the declared checks, the UASF certificate and the closed-form bounds."""
    run = _Run(apply_overrides(_load(config), seed=seed))
    run.checks()
    run.uasf()
    run.bounds()
    report = run.report.finalize()
    _write_report(report, out_dir)
    return report


@_guard
def run_simulate(config, out_dir: Path | None = None, seed: int | None = None, paths: int | None = None,
                 workers: int = 1) -> StabilityReport:
    """Simulate the ensemble and attach settling, containment and non-attraction estimates."""
    run = _Run(apply_overrides(_load(config), seed=seed, paths=paths))
    run.uasf()
    run.bounds()
    run.simulate(None if out_dir is None else Path(out_dir), workers=workers)
    report = run.report.finalize()
    _write_report(report, None if out_dir is None else Path(out_dir))
    return report


@_guard
def run_reproduce(name: str, out_dir: Path | None = None, seed: int | None = None, paths: int | None = None,
                  workers: int = 1) -> StabilityReport:
    """Certify, simulate and estimate with the shipped config of a built-in example."""
    run = _Run(apply_overrides(load_config(canonical_config(name)), seed=seed, paths=paths))
    run.checks()
    run.uasf()
    run.bounds()
    run.simulate(None if out_dir is None else Path(out_dir), workers=workers)
    report = run.report.finalize()
    _write_report(report, None if out_dir is None else Path(out_dir))
    return report
