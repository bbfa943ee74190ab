"""Changes-in-changes effects on the treated with censored outcomes.

Each of the four (group, period) cells gets its own product-limit CDF with
unscaled weights. The untreated counterfactual of group 1 in period 1 is::

    F_cf(y) = sum_{j in cell (1,0)} W_j 1{ Q_j <= F00^{-1}(F01(y)) }

which is constant between the jump points of ``F01``. It is stored as a
step distribution on those points after rearrangement. Covariates play no
role here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .data import CensoredSample, EffectCurve, Estimand, StepDistribution, validate_for_estimand
from .distributions import cdf_eval, compose_counterfactual, generalized_inverse, monotone_distribution
from .exceptions import IdentificationError
from .km import km_cdf, order_group, product_limit_weights, support_diagnostics
from .unconfounded import auto_tau_grid, auto_y_grid, check_tau_grid, check_y_grid, explicit_grid

CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class CicRequest:
    sample: CensoredSample
    y_grid: Sequence[float] | str = "auto"
    tau_grid: Sequence[float] | str = "auto"
    allow_defective: bool = False


class CicEstimator:
    def __init__(self, request: CicRequest):
        self.request = request
        self.sample = request.sample
        validate_for_estimand(self.sample, Estimand.ATT).raise_for_failure()

    @cached_property
    def cells(self) -> dict:
        s = self.sample
        return {
            (g, j): order_group(s, (s.g == g) & (s.period == j), label=f"g={g},period={j}")
            for g, j in CELLS
        }

    @cached_property
    def support(self):
        return support_diagnostics(self.cells[c] for c in CELLS)

    @cached_property
    def _cell_cdfs(self) -> dict:
        return {c: km_cdf(self.cells[c]) for c in CELLS}

    def cell_cdf(self, g: int, period: int) -> StepDistribution:
        return self._cell_cdfs[g, period]

    def support_warnings(self) -> list[str]:
        """Treated-cell observed range not contained in the control cell's range, period 0."""
        treated, control = self.cells[1, 0].sorted_q, self.cells[0, 0].sorted_q
        if treated[0] < control[0] or treated[-1] > control[-1]:
            return [
                f"range of cell g=1,period=0 [{treated[0]:.6g}, {treated[-1]:.6g}] is not inside "
                f"that of cell g=0,period=0 [{control[0]:.6g}, {control[-1]:.6g}]"
            ]
        return []

    def counterfactual_values(self, y) -> np.ndarray:
        """Counterfactual CDF at ``y`` before rearrangement."""
        level = compose_counterfactual(self.cell_cdf(0, 1), self.cell_cdf(0, 0), y,
                                      clamp=self.request.allow_defective)
        return np.asarray(cdf_eval(self.cell_cdf(1, 0), level), dtype=float)

    @cached_property
    def _counterfactual(self) -> StepDistribution:
        points = self.cell_cdf(0, 1).jump_points
        return monotone_distribution(points, self.counterfactual_values(points), clip=True)

    def counterfactual_cdf(self) -> StepDistribution:
        """Rearranged counterfactual CDF of the treated group in period 1."""
        return self._counterfactual

    @property
    def tau_h(self) -> float:
        return self.support.tau_h

    @property
    def quantile_bound(self) -> float:
        return min(self.cell_cdf(1, 1).total_mass, self.counterfactual_cdf().total_mass)

    def _require_identified(self) -> None:
        if self.support.defective and not self.request.allow_defective:
            cells = ", ".join(str(g.label) for g in self.support.groups if g.max_censored)
            raise IdentificationError(
                f"largest observation censored in {cells}; only truncated means are identified"
            )

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
            "support_containment": self.support_warnings(),
            "cell_sizes": {str(self.cells[c].label): self.cells[c].size for c in CELLS},
        }

    def _warn_support(self) -> None:
        for msg in self.support_warnings():
            warnings.warn(msg, stacklevel=3)

    def att(self) -> EffectCurve:
        self._require_identified()
        self._warn_support()
        g11, g10 = self.cells[1, 1], self.cells[1, 0]
        w11 = product_limit_weights(g11.delta)
        w10 = product_limit_weights(g10.delta)
        keep = w10 > 0
        mapped = compose_counterfactual(self.cell_cdf(0, 0), self.cell_cdf(0, 1), g10.sorted_q[keep],
                                        clamp=self.request.allow_defective)
        value = float(np.dot(w11, g11.sorted_q) - np.dot(w10[keep], mapped))
        return EffectCurve.scalar(value, Estimand.ATT, diagnostics=self.diagnostics())

    def dtt(self, grid=None) -> EffectCurve:
        self._warn_support()
        grid = self.y_grid() if grid is None else np.asarray(grid, dtype=float)
        values = np.asarray(cdf_eval(self.cell_cdf(1, 1), grid)) - self.counterfactual_values(grid)
        return EffectCurve(grid, values, Estimand.DTT, diagnostics=self.diagnostics())

    def qtt(self, grid=None) -> EffectCurve:
        self._warn_support()
        grid = self.tau_grid() if grid is None else np.asarray(grid, dtype=float)
        values = (np.asarray(generalized_inverse(self.cell_cdf(1, 1), grid))
                  - np.asarray(generalized_inverse(self.counterfactual_cdf(), grid)))
        return EffectCurve(grid, values, Estimand.QTT, diagnostics=self.diagnostics())


def estimate_cell_cdf(request: CicRequest, g: int, period: int) -> StepDistribution:
    return CicEstimator(request).cell_cdf(g, period)


def estimate_counterfactual_cdf(request: CicRequest) -> StepDistribution:
    return CicEstimator(request).counterfactual_cdf()


def estimate_att(request: CicRequest) -> EffectCurve:
    return CicEstimator(request).att()


def estimate_dtt(request: CicRequest) -> EffectCurve:
    return CicEstimator(request).dtt()


def estimate_qtt(request: CicRequest) -> EffectCurve:
    return CicEstimator(request).qtt()
