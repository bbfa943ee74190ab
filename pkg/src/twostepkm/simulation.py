"""Monte Carlo study of the unconfounded estimators under right censoring.

Four designs share ``X, e0, e1 ~ N(0, 1)``, ``P(T=1|X) = expit(0.5 X)`` and
censoring ``C ~ Exponential(rate a_c)`` independent of everything else:

====== ================ ==========================
design Y0               Y1
====== ================ ==========================
1      e0               Y0 + 1
2      e0               Y0 + 1 + e1
3      X + e0           Y0 + 1 + X
4      X + e0           Y0 + 1 + X + e1
====== ================ ==========================

In every design ``E(Y1) = median(Y1) = 1`` and ``E(Y0) = median(Y0) = 0``.
The rate ``a_c`` is solved for so that ``P(Y > C)`` hits the target
censoring share, integrating over ``X`` by Gauss-Hermite quadrature.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import brentq
from scipy.special import expit, log_ndtr, ndtr

from .data import CensoredSample
from .exceptions import TwoStepKMError, ValidationError
from .propensity import PropensitySpec
from .unconfounded import UnconfoundedEstimator, UnconfoundedRequest

logger = logging.getLogger(__name__)

DESIGNS = (1, 2, 3, 4)
CENSORING_LEVELS = (0.0, 0.10, 0.30)
ESTIMATORS = ("2SKM", "Ignore", "Uncens")
TARGETS = ("E(Y1)", "E(Y0)", "median(Y1)", "median(Y0)", "ATE", "QTE(0.5)")
TRUTHS = {"E(Y1)": 1.0, "E(Y0)": 0.0, "median(Y1)": 1.0, "median(Y0)": 0.0, "ATE": 1.0, "QTE(0.5)": 1.0}
FAILURE_FLAG_SHARE = 0.01

_GH_NODES, _GH_WEIGHTS = hermegauss(64)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DesignSpec:
    design_id: int
    n: int = 1000
    target_censoring: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.design_id not in DESIGNS:
            raise ValidationError(f"design must be one of {DESIGNS}, got {self.design_id!r}")
        if self.n < 2:
            raise ValidationError("n must be at least 2")
        if not 0 <= self.target_censoring < 1:
            raise ValidationError("target censoring must lie in [0, 1)")

    @property
    def rate(self) -> float | None:
        """Calibrated censoring rate, or None without censoring."""
        if self.target_censoring == 0:
            return None
        return calibrate_censoring(self.design_id, self.target_censoring)


def conditional_laws(design_id: int, x):
    """Means and standard deviations of ``Y1 | X`` and ``Y0 | X``."""
    x = np.asarray(x, dtype=float)
    shift = x if design_id in (3, 4) else np.zeros_like(x)
    sd1 = math.sqrt(2.0) if design_id in (2, 4) else 1.0
    return (1.0 + 2.0 * shift, np.full_like(x, sd1)), (shift, np.ones_like(x))


def _exceed_exponential(mean, sd, rate: float):
    """``P(Y > C)`` for ``Y ~ N(mean, sd^2)`` and ``C ~ Exponential(rate)``."""
    z = mean / sd
    tail = np.exp(-rate * mean + 0.5 * (rate * sd) ** 2 + log_ndtr(z - rate * sd))
    return ndtr(z) - tail


def censoring_probability(design_id: int, rate: float) -> float:
    """Population share of censored observations at censoring rate ``rate``."""
    p = expit(0.5 * _GH_NODES)
    (m1, s1), (m0, s0) = conditional_laws(design_id, _GH_NODES)
    per_x = p * _exceed_exponential(m1, s1, rate) + (1 - p) * _exceed_exponential(m0, s0, rate)
    return float(np.dot(_GH_WEIGHTS, per_x))


@lru_cache(maxsize=None)
def calibrate_censoring(design_id: int, target: float) -> float:
    """Exponential censoring rate giving censoring share ``target``.

    The share increases from 0 towards ``P(Y > 0)`` as the rate grows;
    targets at or beyond that limit cannot be reached.
    """
    if not 0 < target < 1:
        raise ValidationError("target censoring must lie in (0, 1)")
    ceiling = censoring_probability(design_id, 1e6)
    if target >= ceiling:
        raise ValueError(f"design {design_id} cannot reach censoring {target}; the limit is {ceiling:.4f}")

    def gap(log_rate):
        return censoring_probability(design_id, math.exp(log_rate)) - target

    lo, hi = -30.0, math.log(1e6)
    assert gap(lo) < 0 < gap(hi), "censoring share does not bracket the target"
    log_rate = brentq(gap, lo, hi, xtol=1e-12, rtol=1e-12)
    return math.exp(log_rate)


def generate(design: DesignSpec, rng: np.random.Generator) -> CensoredSample:
    n = design.n
    x = rng.standard_normal(n)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    t = (rng.random(n) < expit(0.5 * x)).astype(np.int8)
    y0 = e0 + (x if design.design_id in (3, 4) else 0.0)
    y1 = y0 + 1.0
    if design.design_id in (3, 4):
        y1 = y1 + x
    if design.design_id in (2, 4):
        y1 = y1 + e1
    y = np.where(t == 1, y1, y0)
    rate = design.rate
    if rate is None:
        q, delta = y, np.ones(n, dtype=bool)
    else:
        c = rng.exponential(1.0 / rate, n)
        q, delta = np.minimum(y, c), y <= c
    return CensoredSample(q=q, delta=delta, x=x[:, None], t=t)


def series_logit_spec() -> PropensitySpec:
    """Series logit on ``1, X, X^2, X^3``."""
    return PropensitySpec(method="series", order=4)


def _targets(request: UnconfoundedRequest) -> dict:
    return _targets_from(UnconfoundedEstimator(request))


def _targets_from(est: UnconfoundedEstimator) -> dict:
    m1, m0 = est.potential_mean(1), est.potential_mean(0)
    med1 = float(est.potential_quantile(1, 0.5))
    med0 = float(est.potential_quantile(0, 0.5))
    return {"E(Y1)": m1, "E(Y0)": m0, "median(Y1)": med1, "median(Y0)": med0,
            "ATE": m1 - m0, "QTE(0.5)": med1 - med0}


def two_step_km(sample: CensoredSample, propensity_spec: PropensitySpec) -> dict:
    """2SKM estimates of the six targets; truncated means are accepted."""
    return _targets(UnconfoundedRequest(sample, propensity_spec, allow_defective=True))


def naive_ignore(sample: CensoredSample, propensity_spec: PropensitySpec) -> dict:
    """Plain IPW treating every ``Q`` as the outcome."""
    uncensored = sample.replace(delta=np.ones(sample.n, dtype=bool))
    return _targets(UnconfoundedRequest(uncensored, propensity_spec))


def naive_uncensored(sample: CensoredSample, propensity_spec: PropensitySpec) -> dict:
    """Plain IPW over the uncensored rows only.

    The propensity score is fitted on the full sample and evaluated at the
    kept rows; averages are taken over the kept rows.
    """
    kept = sample.delta
    if not kept.any():
        raise ValidationError("no uncensored observations left")
    fit = propensity_spec.fit(sample.x, sample.t)
    sub_fit = dataclasses.replace(fit, fitted=fit.fitted[kept])
    request = UnconfoundedRequest(sample.take(kept), propensity_spec)
    est = UnconfoundedEstimator(request, propensity_fit=sub_fit)
    return _targets_from(est)


ESTIMATOR_FUNCTIONS = {"2SKM": two_step_km, "Ignore": naive_ignore, "Uncens": naive_uncensored}


@dataclass(frozen=True)
class CellResult:
    design: int
    censoring: float
    estimator: str
    target: str
    bias_pp: float
    rmse: float
    reps: int
    failures: int

    @property
    def flagged(self) -> bool:
        return self.failures > FAILURE_FLAG_SHARE * self.reps


@dataclass(frozen=True)
class SimulationReport:
    cells: tuple[CellResult, ...]
    n: int
    reps: int
    seed: int
    estimates: dict = field(default_factory=dict, repr=False, compare=False)

    def get(self, design: int, censoring: float, estimator: str, target: str) -> CellResult:
        for c in self.cells:
            if (c.design, c.estimator, c.target) == (design, estimator, target) and math.isclose(c.censoring, censoring):
                return c
        raise KeyError((design, censoring, estimator, target))

    def mc_se_pp(self, design: int, censoring: float, estimator: str, target: str) -> float:
        """Monte Carlo standard error of a bias entry, in percentage points."""
        values = self.estimates[design, censoring, estimator][target]
        ok = values[np.isfinite(values)]
        return 100.0 * float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else math.nan

    def rows(self) -> list[dict]:
        return [
            {"design": c.design, "censoring": c.censoring, "estimator": c.estimator, "target": c.target,
             "bias_pp": c.bias_pp, "rmse": c.rmse, "reps": c.reps, "failures": c.failures}
            for c in self.cells
        ]

    def to_csv(self, path) -> None:
        fields = ["design", "censoring", "estimator", "target", "bias_pp", "rmse", "reps", "failures"]
        out = sys.stdout if path == "-" else open(path, "w", newline="")
        try:
            writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                row = dict(row)
                row["bias_pp"] = format(row["bias_pp"], ".17g")
                row["rmse"] = format(row["rmse"], ".17g")
                writer.writerow(row)
        finally:
            if out is not sys.stdout:
                out.close()


def _replicate(design: DesignSpec, level_idx: int, rep: int, seed: int, estimators, spec) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(design.design_id, level_idx, rep)))
    sample = generate(design, rng)
    out = {}
    for name in estimators:
        try:
            out[name] = ESTIMATOR_FUNCTIONS[name](sample, spec)
        except TwoStepKMError as exc:
            logger.debug("replicate %d of design %d failed for %s: %s", rep, design.design_id, name, exc)
            out[name] = None
    return out


def _batch(design, level_idx, reps, seed, estimators, spec):
    return [_replicate(design, level_idx, r, seed, estimators, spec) for r in reps]


def run_study(
    designs: Iterable[int] = DESIGNS,
    censoring_levels: Sequence[float] = CENSORING_LEVELS,
    reps: int = 1000,
    estimators: Sequence[str] = ESTIMATORS,
    seed: int = 0,
    n: int = 1000,
    propensity_spec: PropensitySpec | None = None,
    n_jobs: int = 1,
    progress=None,
) -> SimulationReport:
    """Bias and RMSE of each estimator for each design and censoring level.

    Without censoring only the 2SKM rows are produced, since the naive
    estimators coincide with it. ``progress`` is called with a short
    message after each cell.
    """
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValidationError(f"unknown estimators: {sorted(unknown)}")
    spec = propensity_spec or series_logit_spec()
    cells, estimates = [], {}
    all_levels = list(CENSORING_LEVELS)
    for d in designs:
        for level in censoring_levels:
            level_idx = all_levels.index(level) if level in all_levels else len(all_levels) + list(censoring_levels).index(level)
            design = DesignSpec(d, n=n, target_censoring=level)
            active = [e for e in estimators if level > 0 or e == "2SKM"]
            chunks = np.array_split(np.arange(reps), max(1, min(reps, 4 * n_jobs)))
            if n_jobs == 1:
                batches = [_batch(design, level_idx, c, seed, active, spec) for c in chunks]
            else:
                batches = Parallel(n_jobs=n_jobs)(
                    delayed(_batch)(design, level_idx, c, seed, active, spec) for c in chunks
                )
            results = [r for b in batches for r in b]
            for name in active:
                table = {t: np.array([r[name][t] if r[name] is not None else np.nan for r in results])
                         for t in TARGETS}
                estimates[d, level, name] = table
                for target in TARGETS:
                    values = table[target]
                    ok = values[np.isfinite(values)]
                    err = ok - TRUTHS[target]
                    cells.append(CellResult(
                        design=d, censoring=level, estimator=name, target=target,
                        bias_pp=100.0 * float(err.mean()) if ok.size else math.nan,
                        rmse=float(np.sqrt(np.mean(err**2))) if ok.size else math.nan,
                        reps=reps, failures=int(values.size - ok.size),
                    ))
            if progress is not None:
                progress(f"design {d}, censoring {level:g}: {reps} replicates done")
    return SimulationReport(tuple(cells), n=n, reps=reps, seed=seed, estimates=estimates)
