"""Euler-Maruyama ensembles with absorption at the origin.

Each path owns an independent PCG64 stream seeded from
``SeedSequence([master_seed, path_index])``, so a path's noise never depends on
which other paths share its batch or worker. Paths are advanced together as
numpy arrays; stopped paths are dropped from the active set.

The settling event x(t) = 0 is replaced by |x| <= absorption_radius. Once a path
is absorbed its state is pinned at 0, which is exact because f(t, 0) = g(t, 0) = 0.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .systems import SdeSystem

__all__ = [
    "SimConfig",
    "Trajectory",
    "TrajectoryEnsemble",
    "AnnulusExitStats",
    "SimulationError",
    "path_rng",
    "simulate_path",
    "simulate_ensemble",
    "annulus_exit_time",
]

BLOWUP_THRESHOLD = 1e12
_NOISE_CHUNK = 1024

# stop codes
_RUNNING, _INNER, _OUTER, _BLOWUP = 0, 1, 2, 3


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t0: float = 0.0
    t_end: float = 30.0
    n_paths: int = 1000
    master_seed: int = 0
    absorption_radius: float = 1e-3
    record_stride: int = 1
    record_paths: int | None = 0  # paths whose states are kept; None keeps all

    def __post_init__(self):
        if not self.dt > 0:
            raise SimulationError(f"dt must be positive, got {self.dt}")
        if not self.t_end > self.t0:
            raise SimulationError(f"t_end ({self.t_end}) must exceed t0 ({self.t0})")
        if self.n_paths < 1:
            raise SimulationError("n_paths must be positive")
        if not self.absorption_radius > 0:
            raise SimulationError("absorption_radius must be positive")
        if self.record_stride < 1:
            raise SimulationError("record_stride must be >= 1")
        if self.master_seed < 0:
            raise SimulationError("master_seed must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t0) / self.dt))

    def time(self, k) -> float:
        return self.t0 + k * self.dt


@dataclass
class Trajectory:
    path_index: int
    settling_time: float | None
    sup_norm: float
    min_norm: float
    blowup: bool = False
    blowup_time: float | None = None
    times: np.ndarray | None = field(default=None, repr=False)
    states: np.ndarray | None = field(default=None, repr=False)

    @property
    def absorbed(self) -> bool:
        return self.settling_time is not None


@dataclass
class TrajectoryEnsemble:
    system_name: str
    x0: tuple
    config: SimConfig
    trajectories: list

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def settling_times(self) -> np.ndarray:
        """Per-path settling times, NaN where not absorbed."""
        return np.array([np.nan if tr.settling_time is None else tr.settling_time for tr in self.trajectories])

    @property
    def sup_norms(self) -> np.ndarray:
        return np.array([tr.sup_norm for tr in self.trajectories])

    @property
    def min_norms(self) -> np.ndarray:
        return np.array([tr.min_norm for tr in self.trajectories])

    @property
    def blowup_fraction(self) -> float:
        return sum(tr.blowup for tr in self.trajectories) / len(self.trajectories)

    def summary_rows(self):
        for tr in self.trajectories:
            yield {
                "path": tr.path_index,
                "settling_time": "" if tr.settling_time is None else repr(tr.settling_time),
                "sup_norm": repr(tr.sup_norm),
                "min_norm": repr(tr.min_norm),
                "absorbed": int(tr.absorbed),
                "blowup": int(tr.blowup),
            }

    def config_echo(self) -> dict:
        return asdict(self.config)


@dataclass
class AnnulusExitStats:
    n: int
    exited: int
    inner_hits: int
    outer_hits: int
    mean_exit_time: float | None
    max_exit_time: float | None
    exit_times: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)  # 1 inner, 2 outer, 0 none

    @property
    def fraction_exited(self) -> float:
        return self.exited / self.n


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), int(path_index)])))


@dataclass
class _BatchResult:
    indices: np.ndarray
    stop_step: np.ndarray
    stop_code: np.ndarray
    sup_norm: np.ndarray
    min_norm: np.ndarray
    records: dict


def _run_batch(system: SdeSystem, x0: np.ndarray, config: SimConfig, indices,
               inner: float, outer: float, pin: bool, record: set) -> _BatchResult:
    """Advance the given paths until each stops or the horizon is reached."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    r, d = system.r, system.d
    n_steps = config.n_steps
    sqdt = math.sqrt(config.dt)
    stride = config.record_stride
    n_rec = n_steps // stride + 1

    x0_norm = float(np.linalg.norm(x0))
    stop_step = np.full(n, -1, dtype=np.int64)
    stop_code = np.zeros(n, dtype=np.int8)
    sup_norm = np.full(n, x0_norm)
    min_norm = np.full(n, x0_norm)
    records = {}
    for pos, idx in enumerate(indices):
        if int(idx) in record:
            buf = np.full((n_rec, r), np.nan)
            buf[0] = x0
            records[pos] = buf

    if x0_norm <= inner:
        stop_step[:] = 0
        stop_code[:] = _INNER
        if pin:
            min_norm[:] = 0.0
            for buf in records.values():
                buf[:] = 0.0
        return _BatchResult(indices, stop_step, stop_code, sup_norm, min_norm, records)
    if x0_norm >= outer:
        stop_step[:] = 0
        stop_code[:] = _OUTER
        return _BatchResult(indices, stop_step, stop_code, sup_norm, min_norm, records)

    rngs = [path_rng(config.master_seed, idx) for idx in indices]
    is_rec = np.zeros(n, dtype=bool)
    is_rec[list(records)] = True
    active = np.arange(n)
    X = np.repeat(np.asarray(x0, dtype=float).reshape(r, 1), n, axis=1)
    sup_a = sup_norm.copy()
    min_a = min_norm.copy()

    def retire(mask, code, k):
        nonlocal active, X, sup_a, min_a, noise_col
        pos = active[mask]
        stop_step[pos] = k
        stop_code[pos] = code
        sup_norm[pos] = sup_a[mask]
        min_norm[pos] = min_a[mask]
        keep = ~mask
        active, X, sup_a, min_a, noise_col = active[keep], X[:, keep], sup_a[keep], min_a[keep], noise_col[keep]

    noise = None
    noise_col = np.arange(n)
    for k in range(n_steps):
        if active.size == 0:
            break
        if k % _NOISE_CHUNK == 0:
            width = min(_NOISE_CHUNK, n_steps - k)
            noise = np.empty((width, d, active.size))
            for j, pos in enumerate(active):
                noise[:, :, j] = rngs[pos].standard_normal((width, d))
            noise_col = np.arange(active.size)
        t = config.time(k)
        dW = noise[k % _NOISE_CHUNK][:, noise_col] * sqdt
        f = system.drift_at(t, X, strict=False)
        G = system.diffusion_at(t, X, strict=False)
        with np.errstate(all="ignore"):
            if d == 1:
                X = X + f * config.dt + G[:, 0, :] * dW[0]
            else:
                X = X + f * config.dt + np.einsum("ikn,kn->in", G, dW)
            norms = np.sqrt(np.sum(X * X, axis=0)) if r > 1 else np.abs(X[0])
        bad = ~np.isfinite(norms) | (norms > BLOWUP_THRESHOLD)
        hit_in = ~bad & (norms <= inner)
        hit_out = ~bad & ~hit_in & (norms >= outer)
        ok = ~bad
        sup_a = np.where(ok, np.maximum(sup_a, norms), sup_a)
        min_a = np.where(ok, np.minimum(min_a, norms), min_a)
        if pin and hit_in.any():
            X[:, hit_in] = 0.0
            min_a[hit_in] = 0.0

        step = k + 1
        if records and step % stride == 0:
            row = step // stride
            for j in np.flatnonzero(is_rec[active] & ~bad):
                records[active[j]][row] = X[:, j]

        if bad.any():
            retire(bad, _BLOWUP, step)
            hit_in, hit_out = hit_in[~bad], hit_out[~bad]
        if hit_in.any():
            stopped = active[hit_in]
            retire(hit_in, _INNER, step)
            hit_out = hit_out[~hit_in]
            if pin:
                for pos in stopped:
                    buf = records.get(pos)
                    if buf is not None:
                        buf[step // stride + (step % stride > 0):] = 0.0
        if hit_out.any():
            retire(hit_out, _OUTER, step)

    sup_norm[active] = sup_a
    min_norm[active] = min_a
    return _BatchResult(indices, stop_step, stop_code, sup_norm, min_norm, records)


def _batch_worker(args):
    return _run_batch(*args)


def _run(system, x0, config, inner, outer, pin, record, workers, batch_size):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (system.r,):
        raise SimulationError(f"x0 has shape {x0.shape}, system {system.name} has r={system.r}")
    if not np.all(np.isfinite(x0)):
        raise SimulationError("x0 must be finite")
    indices = np.arange(config.n_paths)
    if batch_size is None:
        batch_size = config.n_paths if workers <= 1 else math.ceil(config.n_paths / workers)
    batches = [indices[i:i + batch_size] for i in range(0, config.n_paths, batch_size)]
    jobs = [(system, x0, config, b, inner, outer, pin, record) for b in batches]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_worker, jobs))
    else:
        results = [_batch_worker(job) for job in jobs]
    return x0, results


def _recorded_times(config: SimConfig) -> np.ndarray:
    n_rec = config.n_steps // config.record_stride + 1
    return config.time(np.arange(n_rec) * config.record_stride)


def simulate_ensemble(system: SdeSystem, x0, config: SimConfig, workers: int = 1,
                      batch_size: int | None = None) -> TrajectoryEnsemble:
    """Run ``config.n_paths`` independent paths.

    The result depends only on (system, x0, config); ``workers`` and
    ``batch_size`` change scheduling, never values. Paths that blow up
    (non-finite or |x| > 1e12) are flagged rather than aborting the run.
    """
    if config.record_paths is None:
        record = set(range(config.n_paths))
    else:
        record = set(range(min(config.record_paths, config.n_paths)))
    x0, results = _run(system, x0, config, config.absorption_radius, math.inf, True, record,
                       workers, batch_size)
    times = _recorded_times(config)
    trajectories = []
    for res in results:
        for pos, idx in enumerate(res.indices):
            code = res.stop_code[pos]
            stop_time = float(config.time(res.stop_step[pos]))
            buf = res.records.get(pos)
            trajectories.append(Trajectory(
                path_index=int(idx),
                settling_time=stop_time if code == _INNER else None,
                sup_norm=float(res.sup_norm[pos]),
                min_norm=float(res.min_norm[pos]),
                blowup=bool(code == _BLOWUP),
                blowup_time=stop_time if code == _BLOWUP else None,
                times=None if buf is None else times,
                states=buf,
            ))
    trajectories.sort(key=lambda tr: tr.path_index)
    return TrajectoryEnsemble(system.name, tuple(float(v) for v in x0), config, trajectories)


def simulate_path(system: SdeSystem, x0, config: SimConfig, path_index: int = 0) -> Trajectory:
    """Simulate the single path ``path_index`` with its states recorded."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (system.r,):
        raise SimulationError(f"x0 has shape {x0.shape}, system {system.name} has r={system.r}")
    res = _run_batch(system, x0, config, [path_index], config.absorption_radius, math.inf, True,
                     {int(path_index)})
    code = res.stop_code[0]
    stop_time = float(config.time(res.stop_step[0]))
    return Trajectory(
        path_index=int(path_index),
        settling_time=stop_time if code == _INNER else None,
        sup_norm=float(res.sup_norm[0]),
        min_norm=float(res.min_norm[0]),
        blowup=bool(code == _BLOWUP),
        blowup_time=stop_time if code == _BLOWUP else None,
        times=_recorded_times(config),
        states=res.records[0],
    )


def annulus_exit_time(system: SdeSystem, x0, outer: float, inner: float, config: SimConfig,
                      workers: int = 1) -> AnnulusExitStats:
    """First time |x| leaves the open annulus (inner, outer); no pinning."""
    x0n = float(np.linalg.norm(np.atleast_1d(np.asarray(x0, dtype=float))))
    if not inner < x0n < outer:
        raise SimulationError(f"|x0| = {x0n} is not inside the annulus ({inner}, {outer})")
    _, results = _run(system, x0, config, inner, outer, False, set(), workers, None)
    steps = np.concatenate([res.stop_step for res in results])
    codes = np.concatenate([res.stop_code for res in results])
    exited = (codes == _INNER) | (codes == _OUTER)
    exit_times = np.where(exited, config.time(steps), np.nan)
    boundary = np.where(exited, codes, 0)
    return AnnulusExitStats(
        n=config.n_paths,
        exited=int(exited.sum()),
        inner_hits=int((codes == _INNER).sum()),
        outer_hits=int((codes == _OUTER).sum()),
        mean_exit_time=float(np.mean(exit_times[exited])) if exited.any() else None,
        max_exit_time=float(np.max(exit_times[exited])) if exited.any() else None,
        exit_times=exit_times,
        boundary=boundary,
    )
