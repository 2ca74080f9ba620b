"""Statistical verdicts from simulated ensembles."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binomtest

from .simulate import TrajectoryEnsemble

__all__ = [
    "SettlingStats",
    "BoundVerdict",
    "ProportionEstimate",
    "settling_statistics",
    "bound_check",
    "containment_probability",
    "nonattraction_fraction",
    "PASS",
    "FAIL",
    "INCONCLUSIVE",
]

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"
MIN_ABSORBED_FRACTION = 0.95
N_SIGMA = 3.0


@dataclass(frozen=True)
class SettlingStats:
    n: int
    absorbed_count: int
    mean: float | None
    stderr: float | None
    max: float | None
    fraction_absorbed: float
    absorption_radius: float
    t_end: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BoundVerdict:
    verdict: str
    bound: float
    mean: float | None
    stderr: float | None
    upper: float | None
    fraction_absorbed: float
    policy: str = (
        f"PASS iff mean + {N_SIGMA:g} stderr <= bound and absorbed fraction >= {MIN_ABSORBED_FRACTION}; "
        f"INCONCLUSIVE if absorbed fraction < {MIN_ABSORBED_FRACTION}"
    )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProportionEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    successes: int
    n: int
    threshold: float
    confidence: float = 0.95
    method: str = "wilson"

    def to_dict(self) -> dict:
        return asdict(self)


def settling_statistics(ensemble: TrajectoryEnsemble) -> SettlingStats:
    times = ensemble.settling_times
    if times.size == 0:
        raise ValueError("ensemble is empty")
    hit = times[~np.isnan(times)]
    k = int(hit.size)
    mean = stderr = mx = None
    if k:
        # sorting makes the sum independent of path order
        hit = np.sort(hit)
        mean = float(math.fsum(hit) / k)
        stderr = float(np.std(hit, ddof=1) / math.sqrt(k)) if k > 1 else 0.0
        mx = float(hit[-1])
    return SettlingStats(
        n=int(times.size),
        absorbed_count=k,
        mean=mean,
        stderr=stderr,
        max=mx,
        fraction_absorbed=k / times.size,
        absorption_radius=ensemble.config.absorption_radius,
        t_end=ensemble.config.t_end,
    )


def bound_check(stats: SettlingStats, bound: float) -> BoundVerdict:
    if stats.fraction_absorbed < MIN_ABSORBED_FRACTION or stats.mean is None:
        return BoundVerdict(INCONCLUSIVE, bound, stats.mean, stats.stderr, None, stats.fraction_absorbed)
    upper = stats.mean + N_SIGMA * stats.stderr
    verdict = PASS if upper <= bound else FAIL
    return BoundVerdict(verdict, bound, stats.mean, stats.stderr, upper, stats.fraction_absorbed)


def _proportion(successes: int, n: int, threshold: float) -> ProportionEstimate:
    if n == 0:
        raise ValueError("ensemble is empty")
    ci = binomtest(successes, n).proportion_ci(confidence_level=0.95, method="wilson")
    return ProportionEstimate(successes / n, float(ci.low), float(ci.high), successes, n, threshold)


def containment_probability(ensemble: TrajectoryEnsemble, R: float) -> ProportionEstimate:
    """Fraction of paths whose running sup of |x| stays below R."""
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    sup = ensemble.sup_norms
    return _proportion(int(np.count_nonzero(sup < R)), sup.size, R)


def nonattraction_fraction(ensemble: TrajectoryEnsemble, eps: float) -> ProportionEstimate:
    """Fraction of paths that came within ``eps`` of the origin.

    Despite the name this counts the attracted paths: a small value is the
    evidence of non-attraction.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    low = ensemble.min_norms
    return _proportion(int(np.count_nonzero(low <= eps)), low.size, eps)
