"""Average, distributional and quantile treatment effects under selection on observables.

Each arm's outcome CDF is a Kaplan-Meier integral with the inverse of the
estimated propensity score in the integrand::

    F1(y) = sum_i W_i 1{Q_i <= y} / p(X_i)          over treated order statistics
    F0(y) = sum_i W_i 1{Q_i <= y} / (1 - p(X_i))    over control order statistics

where ``W_i`` are Kaplan-Meier weights scaled by the arm's share of the
sample. Weights are not normalised (Horvitz-Thompson form), so the masses
of ``F1`` and ``F0`` need not equal one in finite samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import CensoredSample, EffectCurve, Estimand, StepDistribution, validate_for_estimand
from .distributions import cdf_eval, generalized_inverse, monotone_distribution
from .exceptions import IdentificationError
from .km import aggregate_atoms, km_weights, order_group, support_diagnostics
from .propensity import PropensityFit, PropensitySpec

DEFAULT_TAU_GRID = tuple(np.round(np.arange(1, 20) * 0.05, 2))


@dataclass(frozen=True)
class UnconfoundedRequest:
    sample: CensoredSample
    propensity: PropensitySpec = field(default_factory=PropensitySpec)
    y_grid: Sequence[float] | str = "auto"
    tau_grid: Sequence[float] | str = "auto"
    allow_defective: bool = False


def explicit_grid(values, name: str) -> np.ndarray:
    grid = np.asarray(values, dtype=float).ravel()
    if grid.size == 0 or not np.all(np.isfinite(grid)):
        raise IdentificationError(f"{name} must be a non-empty list of finite values")
    if np.any(np.diff(grid) <= 0):
        raise IdentificationError(f"{name} must be strictly ascending")
    return grid


def check_y_grid(grid: np.ndarray, tau_h: float, allow_defective: bool) -> None:
    if not allow_defective and np.any(grid > tau_h):
        bad = grid[grid > tau_h][0]
        raise IdentificationError(f"y={bad:.6g} lies beyond the largest identified outcome {tau_h:.6g}")


def check_tau_grid(grid: np.ndarray, bound: float) -> None:
    if np.any((grid <= 0) | (grid >= 1)):
        raise IdentificationError("quantile levels must lie strictly between 0 and 1")
    if np.any(grid > bound):
        bad = grid[grid > bound][0]
        raise IdentificationError(f"quantile beyond identified region: tau={bad:.6g} exceeds {bound:.6g}")


def auto_y_grid(groups, tau_h: float) -> np.ndarray:
    """Distinct uncensored outcomes strictly below ``tau_h``, pooled across groups."""
    pts = np.unique(np.concatenate([g.sorted_q[g.delta] for g in groups]))
    return pts[pts < tau_h]


def auto_tau_grid(bound: float) -> np.ndarray:
    grid = np.array(DEFAULT_TAU_GRID)
    return grid[grid <= bound]


class UnconfoundedEstimator:
    """Fits the propensity score once and serves every estimand from it.

    Parameters
    ----------
    request : UnconfoundedRequest
    propensity_fit : PropensityFit, optional
        Pre-computed fit on ``request.sample``; fitted from
        ``request.propensity`` when omitted.
    """

    def __init__(self, request: UnconfoundedRequest, propensity_fit: PropensityFit | None = None):
        self.request = request
        self.sample = request.sample
        validate_for_estimand(self.sample, Estimand.ATE).raise_for_failure()
        self._fit = propensity_fit

    @cached_property
    def propensity_fit(self) -> PropensityFit:
        if self._fit is not None:
            return self._fit
        return self.request.propensity.fit(self.sample.x, self.sample.t)

    @cached_property
    def groups(self) -> dict:
        return {t: order_group(self.sample, self.sample.t == t, label=f"t={t}") for t in (1, 0)}

    @cached_property
    def support(self):
        return support_diagnostics(self.groups.values())

    def _require_identified(self) -> None:
        if self.support.defective and not self.request.allow_defective:
            raise IdentificationError(
                "largest observation censored in " + ", ".join(
                    str(g.label) for g in self.support.groups if g.max_censored)
                + "; only truncated means are identified (set allow_defective to accept them)"
            )

    def arm_masses(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Sorted outcomes of arm ``t`` and their inverse-propensity-weighted masses."""
        group = self.groups[t]
        p = self.propensity_fit.fitted[group.original_index]
        w = km_weights(group).weights
        return group.sorted_q, w / (p if t == 1 else 1.0 - p)

    @cached_property
    def _cdfs(self) -> dict:
        return {t: StepDistribution(*aggregate_atoms(*self.arm_masses(t))) for t in (1, 0)}

    @cached_property
    def _monotone_cdfs(self) -> dict:
        return {t: monotone_distribution(c.jump_points, c.cumulative) for t, c in self._cdfs.items()}

    def potential_cdf(self, t: int) -> StepDistribution:
        return self._cdfs[t]

    def potential_mean(self, t: int) -> float:
        self._require_identified()
        q, m = self.arm_masses(t)
        return float(np.dot(m, q))

    def potential_quantile(self, t: int, tau):
        """Generalized inverse of the rearranged arm CDF."""
        return generalized_inverse(self._monotone_cdfs[t], tau)

    @property
    def quantile_bound(self) -> float:
        """Largest quantile level both arm CDFs reach."""
        return min(self.potential_cdf(t).total_mass for t in (1, 0))

    def y_grid(self) -> np.ndarray:
        if isinstance(self.request.y_grid, str):
            return auto_y_grid(self.groups.values(), self.support.tau_h)
        grid = explicit_grid(self.request.y_grid, "y grid")
        check_y_grid(grid, self.support.tau_h, self.request.allow_defective)
        return grid

    def tau_grid(self) -> np.ndarray:
        if isinstance(self.request.tau_grid, str):
            return auto_tau_grid(self.quantile_bound)
        grid = explicit_grid(self.request.tau_grid, "tau grid")
        check_tau_grid(grid, self.quantile_bound)
        return grid

    def diagnostics(self) -> dict:
        fit = self.propensity_fit
        return {
            "support": self.support.to_dict(),
            "propensity": fit.summary(),
            "clamp_count": fit.clamp_count,
            "arm_mass": {f"t={t}": self.potential_cdf(t).total_mass for t in (1, 0)},
        }

    def ate(self) -> EffectCurve:
        value = self.potential_mean(1) - self.potential_mean(0)
        return EffectCurve.scalar(value, Estimand.ATE, diagnostics=self.diagnostics())

    def dte(self, grid=None) -> EffectCurve:
        """DTE on the request's grid, or on ``grid`` without the support check."""
        grid = self.y_grid() if grid is None else np.asarray(grid, dtype=float)
        values = cdf_eval(self.potential_cdf(1), grid) - cdf_eval(self.potential_cdf(0), grid)
        return EffectCurve(grid, values, Estimand.DTE, diagnostics=self.diagnostics())

    def qte(self, grid=None) -> EffectCurve:
        grid = self.tau_grid() if grid is None else np.asarray(grid, dtype=float)
        values = np.asarray(self.potential_quantile(1, grid)) - np.asarray(self.potential_quantile(0, grid))
        return EffectCurve(grid, values, Estimand.QTE, diagnostics=self.diagnostics())


def estimate_potential_cdf(request: UnconfoundedRequest, arm: int) -> StepDistribution:
    return UnconfoundedEstimator(request).potential_cdf(arm)


def estimate_ate(request: UnconfoundedRequest) -> EffectCurve:
    return UnconfoundedEstimator(request).ate()


def estimate_dte(request: UnconfoundedRequest) -> EffectCurve:
    return UnconfoundedEstimator(request).dte()


def estimate_qte(request: UnconfoundedRequest) -> EffectCurve:
    return UnconfoundedEstimator(request).qte()
