"""Nonparametric bootstrap uniform confidence bands.

For replicate ``b`` the whole estimator, nuisance fit included, is rerun on
a resample drawn with replacement, and the sup statistic::

    L_b = sqrt(n) * max_grid | estimate_b - estimate |

is recorded. The band is ``estimate +/- c / sqrt(n)`` where ``c`` is the
``ceil((1 - alpha) * B_ok)``-th smallest ``L_b`` over the ``B_ok``
replicates that succeeded.

Replicate ``b`` draws from ``SeedSequence(seed, spawn_key=(b,))``, so the
result does not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import CensoredSample, EffectCurve
from .exceptions import BootstrapError, TwoStepKMError, ValidationError

MAX_FAILED_SHARE = 0.10


@dataclass(frozen=True)
class BootstrapSpec:
    B: int = 999
    alpha: float = 0.05
    seed: int | None = None
    grid: Sequence[float] | None = None

    def __post_init__(self):
        if int(self.B) != self.B or self.B < 1:
            raise ValidationError(f"B must be a positive integer, got {self.B!r}")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.seed is not None and not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=float)
            if g.size == 0 or np.any(np.diff(g) <= 0):
                raise ValidationError("bootstrap grid must be non-empty and ascending")

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(np.random.SeedSequence().entropy % 2**64)


@dataclass(frozen=True, eq=False)
class BandResult:
    """Bootstrap critical value and band for one estimate.

    ``replicate_sup_stats`` holds ``L_b`` for the successful replicates in
    replicate order; ``failed_replicates`` counts the ones whose estimator
    raised.
    """

    critical_value: float
    band_halfwidth: float
    replicate_sup_stats: np.ndarray
    failed_replicates: int
    alpha: float
    B: int
    seed: int
    estimate: EffectCurve = field(repr=False)

    def curve(self) -> EffectCurve:
        """The original estimate with the band attached."""
        return self.estimate.with_band(self.band_halfwidth, self.alpha)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BandResult):
            return NotImplemented
        return (
            self.critical_value == other.critical_value
            and self.band_halfwidth == other.band_halfwidth
            and self.failed_replicates == other.failed_replicates
            and self.alpha == other.alpha and self.B == other.B and self.seed == other.seed
            and np.array_equal(self.replicate_sup_stats, other.replicate_sup_stats)
        )

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "alpha": self.alpha,
            "seed": self.seed,
            "critical_value": self.critical_value,
            "band_halfwidth": self.band_halfwidth,
            "failed_replicates": self.failed_replicates,
        }


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def resample(sample: CensoredSample, rng: np.random.Generator) -> CensoredSample:
    """``n`` rows drawn with replacement, every column drawn jointly."""
    return sample.take(rng.integers(0, sample.n, size=sample.n))


def critical_value(sup_stats, alpha: float) -> float:
    """Smallest order statistic whose rank is at least ``ceil((1 - alpha) * B)``."""
    stats = np.sort(np.asarray(sup_stats, dtype=float))
    if stats.size == 0:
        raise BootstrapError("bootstrap unstable: no successful replicates")
    # guard against (1 - alpha) * B landing a hair above an integer
    rank = math.ceil(round((1.0 - alpha) * stats.size, 9))
    return float(stats[max(rank, 1) - 1])


def _run_batch(sample, estimator, original, seed, indices):
    root_n = math.sqrt(sample.n)
    out = []
    for b in indices:
        try:
            rep = estimator(resample(sample, replicate_rng(seed, b)))
        except TwoStepKMError:
            out.append(np.nan)
            continue
        est = np.asarray(rep.estimates, dtype=float)
        if est.shape != original.shape or not np.all(np.isfinite(est)):
            out.append(np.nan)
            continue
        out.append(root_n * float(np.max(np.abs(est - original))))
    return out


def uniform_band(
    sample: CensoredSample,
    estimator: Callable[[CensoredSample], EffectCurve],
    spec: BootstrapSpec,
    n_jobs: int = 1,
) -> BandResult:
    """Uniform band for ``estimator(sample)`` over its grid.

    Parameters
    ----------
    sample : CensoredSample
    estimator : callable
        Pure function of a sample returning an :class:`EffectCurve` on a
        grid that does not depend on the sample.
    spec : BootstrapSpec
    n_jobs : int
        Worker processes; the result is the same for any value.

    Raises
    ------
    BootstrapError
        When more than 10% of the replicates fail.
    """
    estimate = estimator(sample)
    if spec.grid is not None and not np.array_equal(np.asarray(spec.grid, dtype=float), estimate.grid,
                                                     equal_nan=True):
        raise ValidationError("estimator grid differs from the bootstrap grid")
    original = np.asarray(estimate.estimates, dtype=float)
    seed = spec.resolved_seed()

    n_batches = max(1, min(spec.B, 4 * max(1, n_jobs)))
    batches = [b for b in np.array_split(np.arange(spec.B), n_batches) if b.size]
    if n_jobs == 1:
        results = [_run_batch(sample, estimator, original, seed, b) for b in batches]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_batch)(sample, estimator, original, seed, b) for b in batches
        )
    stats = np.concatenate([np.asarray(r, dtype=float) for r in results])
    failed = int(np.count_nonzero(np.isnan(stats)))
    if failed > MAX_FAILED_SHARE * spec.B:
        raise BootstrapError(f"bootstrap unstable: {failed} of {spec.B} replicates failed")
    ok = stats[~np.isnan(stats)]
    c = critical_value(ok, spec.alpha)
    return BandResult(
        critical_value=c,
        band_halfwidth=c / math.sqrt(sample.n),
        replicate_sup_stats=ok,
        failed_replicates=failed,
        alpha=spec.alpha,
        B=spec.B,
        seed=seed,
        estimate=estimate,
    )
