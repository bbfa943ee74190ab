"""Local (complier) treatment effects with a binary instrument.

The sample is split into the four treatment-by-instrument cells, each with
its own Kaplan-Meier weights. For arm ``t`` the complier CDF is::

    F_t(y) = [ sum_{T=t,Z=1} W 1{Q <= y} / e(X) - sum_{T=t,Z=0} W 1{Q <= y} / (1 - e(X)) ] / kappa_t

with ``e`` the instrument propensity and ``kappa_t`` the plain sample mean
of ``Z 1{T=t} / e(X) - (1 - Z) 1{T=t} / (1 - e(X))``. Note that
``kappa_0`` is negative under monotone compliance; only its magnitude is
compared with the weak-first-stage threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import CensoredSample, EffectCurve, Estimand, StepDistribution, validate_for_estimand
from .distributions import generalized_inverse, monotone_distribution
from .exceptions import IdentificationError, WeakInstrumentError
from .km import aggregate_atoms, km_weights, order_group, support_diagnostics
from .propensity import PropensityFit, PropensitySpec
from .unconfounded import auto_tau_grid, auto_y_grid, check_tau_grid, check_y_grid, explicit_grid

WEAK_FIRST_STAGE = 0.02


@dataclass(frozen=True)
class LateRequest:
    sample: CensoredSample
    propensity: PropensitySpec = field(default_factory=PropensitySpec)
    y_grid: Sequence[float] | str = "auto"
    tau_grid: Sequence[float] | str = "auto"
    allow_defective: bool = False


class LateEstimator:
    """Complier means, CDFs and quantiles sharing one instrument-propensity fit."""

    def __init__(self, request: LateRequest, propensity_fit: PropensityFit | None = None):
        self.request = request
        self.sample = request.sample
        self.sample_diagnostics = validate_for_estimand(self.sample, Estimand.LATE)
        self.sample_diagnostics.raise_for_failure()
        self._fit = propensity_fit

    @cached_property
    def propensity_fit(self) -> PropensityFit:
        if self._fit is not None:
            return self._fit
        return self.request.propensity.fit(self.sample.x, self.sample.z)

    @property
    def e_hat(self) -> np.ndarray:
        return self.propensity_fit.fitted

    @cached_property
    def cells(self) -> dict:
        """Ordered groups keyed by ``(t, z)``; empty cells are left out."""
        s = self.sample
        out = {}
        for t in (1, 0):
            for z in (1, 0):
                mask = (s.t == t) & (s.z == z)
                if mask.any():
                    out[t, z] = order_group(s, mask, label=f"t={t},z={z}")
        return out

    @cached_property
    def support(self):
        return support_diagnostics(self.cells.values())

    def kappa(self, t: int) -> float:
        """Sample first-stage weight for arm ``t``; raises when its magnitude is below 0.02."""
        s, e = self.sample, self.e_hat
        in_arm = s.t == t
        value = float(np.mean(s.z * in_arm / e - (1 - s.z) * in_arm / (1 - e)))
        if abs(value) < WEAK_FIRST_STAGE:
            raise WeakInstrumentError(f"weak first stage: |kappa_{t}| = {abs(value):.4g} < {WEAK_FIRST_STAGE}")
        return value

    def _cell_masses(self, t: int, z: int):
        group = self.cells.get((t, z))
        if group is None:
            return np.empty(0), np.empty(0)
        e = self.e_hat[group.original_index]
        w = km_weights(group).weights
        return group.sorted_q, w / (e if z == 1 else 1.0 - e)

    @cached_property
    def _signed(self) -> dict:
        """Complier CDF jumps per arm: (points, signed masses), aggregated."""
        out = {}
        for t in (1, 0):
            q1, m1 = self._cell_masses(t, 1)
            q0, m0 = self._cell_masses(t, 0)
            q = np.concatenate([q1, q0])
            m = np.concatenate([m1, -m0]) / self.kappa(t)
            order = np.argsort(q, kind="stable")
            out[t] = aggregate_atoms(q[order], m[order])
        return out

    def _require_identified(self) -> None:
        if self.support.defective and not self.request.allow_defective:
            cells = ", ".join(str(g.label) for g in self.support.groups if g.max_censored)
            raise IdentificationError(
                f"largest observation censored in {cells}; only truncated means are identified"
            )

    def complier_mean(self, t: int) -> float:
        self._require_identified()
        q, m = self._signed[t]
        return float(np.dot(q, m))

    def complier_cdf_values(self, t: int, y) -> np.ndarray:
        """Complier CDF of arm ``t`` at ``y`` before rearrangement (may leave ``[0, 1]``)."""
        q, m = self._signed[t]
        cum = np.r_[0.0, np.cumsum(m)]
        return cum[np.searchsorted(q, np.asarray(y, dtype=float), side="right")]

    @cached_property
    def _monotone(self) -> dict:
        out = {}
        for t in (1, 0):
            q, m = self._signed[t]
            out[t] = monotone_distribution(q, np.cumsum(m), clip=True)
        return out

    def complier_cdf(self, t: int) -> StepDistribution:
        """Rearranged complier CDF of arm ``t``, clipped to ``[0, 1]``."""
        return self._monotone[t]

    def clip_magnitude(self) -> dict:
        out = {}
        for t in (1, 0):
            cum = np.cumsum(self._signed[t][1])
            out[f"t={t}"] = float(max(0.0, -cum.min(), cum.max() - 1.0))
        return out

    @property
    def tau_h(self) -> float:
        return self.support.tau_h

    @property
    def quantile_bound(self) -> float:
        return min(self.complier_cdf(t).total_mass for t in (1, 0))

    def y_grid(self) -> np.ndarray:
        if isinstance(self.request.y_grid, str):
            return auto_y_grid(self.cells.values(), self.tau_h)
        grid = explicit_grid(self.request.y_grid, "y grid")
        check_y_grid(grid, self.tau_h, self.request.allow_defective)
        return grid

    def tau_grid(self) -> np.ndarray:
        if isinstance(self.request.tau_grid, str):
            return auto_tau_grid(self.quantile_bound)
        grid = explicit_grid(self.request.tau_grid, "tau grid")
        check_tau_grid(grid, self.quantile_bound)
        return grid

    def diagnostics(self) -> dict:
        return {
            "support": self.support.to_dict(),
            "propensity": self.propensity_fit.summary(),
            "clamp_count": self.propensity_fit.clamp_count,
            "kappa": {f"t={t}": self.kappa(t) for t in (1, 0)},
            "empty_cells": [f"t={t},z={z}" for t in (1, 0) for z in (1, 0) if (t, z) not in self.cells],
            "clip_magnitude": self.clip_magnitude(),
        }

    def late(self) -> EffectCurve:
        value = self.complier_mean(1) - self.complier_mean(0)
        return EffectCurve.scalar(value, Estimand.LATE, diagnostics=self.diagnostics())

    def ldte(self, grid=None) -> EffectCurve:
        grid = self.y_grid() if grid is None else np.asarray(grid, dtype=float)
        values = self.complier_cdf_values(1, grid) - self.complier_cdf_values(0, grid)
        return EffectCurve(grid, values, Estimand.LDTE, diagnostics=self.diagnostics())

    def lqte(self, grid=None) -> EffectCurve:
        grid = self.tau_grid() if grid is None else np.asarray(grid, dtype=float)
        values = (np.asarray(generalized_inverse(self.complier_cdf(1), grid))
                  - np.asarray(generalized_inverse(self.complier_cdf(0), grid)))
        return EffectCurve(grid, values, Estimand.LQTE, diagnostics=self.diagnostics())


def estimate_kappa(request: LateRequest, arm: int) -> float:
    return LateEstimator(request).kappa(arm)


def estimate_complier_mean(request: LateRequest, arm: int) -> float:
    return LateEstimator(request).complier_mean(arm)


def estimate_complier_cdf(request: LateRequest, arm: int) -> StepDistribution:
    return LateEstimator(request).complier_cdf(arm)


def estimate_late(request: LateRequest) -> EffectCurve:
    return LateEstimator(request).late()


def estimate_ldte(request: LateRequest) -> EffectCurve:
    return LateEstimator(request).ldte()


def estimate_lqte(request: LateRequest) -> EffectCurve:
    return LateEstimator(request).lqte()
