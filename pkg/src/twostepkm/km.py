"""Kaplan-Meier weights and integrals within a subpopulation.

Two routes to the same group CDF are provided on purpose:

* :func:`km_weights` / :func:`km_cdf` use the closed-form product-limit
  masses attached to each uncensored order statistic;
* :func:`cumulative_hazard` / :func:`km_cdf_via_hazard` go through the
  discrete cumulative hazard of the subpopulation and its product integral.

They must agree to floating-point precision; the test suite checks this on
randomised inputs.

Tie convention: at equal ``q`` uncensored observations are ordered before
censored ones, then original row order. A censored observation tied with a
death is therefore still at risk at that death, as in the usual
product-limit estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import CensoredSample, StepDistribution, _frozen
from .exceptions import EstimationError, ValidationError


@dataclass(frozen=True, eq=False)
class OrderedGroup:
    """Observations of one subpopulation sorted by ``q`` with their concomitants."""

    sorted_q: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    parent_size: int
    original_index: np.ndarray
    label: object = None

    @property
    def size(self) -> int:
        return self.sorted_q.size

    @property
    def group_fraction(self) -> float:
        return self.size / self.parent_size


@dataclass(frozen=True, eq=False)
class KaplanMeierWeights:
    weights: np.ndarray
    group_fraction: float

    @property
    def total(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class HazardStep:
    """Jumps of the cumulative hazard at distinct uncensored values."""

    locations: np.ndarray
    increments: np.ndarray

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)


def sort_order(q: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Stable order by ``q``, uncensored first within ties."""
    return np.lexsort((~np.asarray(delta, dtype=bool), np.asarray(q)))


def order_group(sample: CensoredSample, selector=None, label=None) -> OrderedGroup:
    """Sort the observations picked by ``selector``.

    ``selector`` is a boolean mask over rows, a callable taking an
    :class:`~twostepkm.data.Observation`, or None for every row.
    """
    if selector is None:
        idx = np.arange(sample.n)
    elif callable(selector):
        idx = np.array([i for i, obs in enumerate(sample.observations()) if selector(obs)], dtype=int)
    else:
        mask = np.asarray(selector)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(int)
    if idx.size == 0:
        raise ValidationError("selection matches no observations")
    return _ordered(sample.q[idx], sample.delta[idx], sample.x[idx], sample.n, idx, label)


def _ordered(q, delta, x, parent_size, idx, label=None) -> OrderedGroup:
    order = sort_order(q, delta)
    return OrderedGroup(
        sorted_q=_frozen(np.asarray(q, dtype=float)[order]),
        delta=_frozen(np.asarray(delta, dtype=bool)[order]),
        x=_frozen(np.asarray(x)[order]),
        parent_size=int(parent_size),
        original_index=_frozen(np.asarray(idx)[order]),
        label=label,
    )


def product_limit_weights(delta_sorted: np.ndarray) -> np.ndarray:
    """Within-group product-limit masses for indicators already in sorted order.

    Entry ``i`` (1-based) equals ``delta_i / (m - i + 1)`` times the running
    product of ``((m - j) / (m - j + 1)) ** delta_j`` over ``j < i``. The
    masses sum to one when the last observation is uncensored.
    """
    d = np.asarray(delta_sorted, dtype=bool)
    m = d.size
    at_risk = np.arange(m, 0, -1, dtype=float)
    factors = np.where(d, (at_risk - 1.0) / at_risk, 1.0)
    survive_before = np.empty(m)
    if m:
        survive_before[0] = 1.0
        np.cumprod(factors[:-1], out=survive_before[1:])
    return np.where(d, survive_before / at_risk, 0.0)


def km_weights(group: OrderedGroup) -> KaplanMeierWeights:
    """Kaplan-Meier weights scaled by the group's share ``n_t / n`` of the sample."""
    w = product_limit_weights(group.delta) * group.group_fraction
    return KaplanMeierWeights(_frozen(w), group.group_fraction)


def aggregate_atoms(points: np.ndarray, masses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``masses`` over equal sorted ``points``; drop atoms with zero mass."""
    keep = masses != 0
    points, masses = points[keep], masses[keep]
    if points.size == 0:
        return points, masses
    starts = np.flatnonzero(np.r_[True, np.diff(points) > 0])
    return points[starts], np.add.reduceat(masses, starts)


def km_cdf(group: OrderedGroup) -> StepDistribution:
    """Product-limit CDF of the group's outcome (total mass at most one)."""
    if not group.delta.any():
        raise EstimationError("group has no uncensored observations")
    pts, masses = aggregate_atoms(group.sorted_q, product_limit_weights(group.delta))
    return StepDistribution(pts, masses)


def cumulative_hazard(group: OrderedGroup) -> HazardStep:
    """Discrete cumulative hazard: deaths over number at risk at each uncensored value."""
    q, d = group.sorted_q, group.delta
    m = q.size
    if not d.any():
        return HazardStep(np.empty(0), np.empty(0))
    locations = np.unique(q[d])
    # number with q >= location, and number of deaths at location
    at_risk = m - np.searchsorted(q, locations, side="left")
    deaths = np.searchsorted(q[d], locations, side="right") - np.searchsorted(q[d], locations, side="left")
    return HazardStep(locations, deaths / at_risk)


def km_cdf_via_hazard(group: OrderedGroup) -> StepDistribution:
    """Group CDF as the product integral of :func:`cumulative_hazard`."""
    haz = cumulative_hazard(group)
    if haz.locations.size == 0:
        raise EstimationError("group has no uncensored observations")
    survival_before = np.r_[1.0, np.cumprod(1.0 - haz.increments)[:-1]]
    return StepDistribution(haz.locations, survival_before * haz.increments)


def km_integral(group: OrderedGroup, phi: Callable, weights: KaplanMeierWeights | None = None) -> float:
    """Sum of ``W_i * phi(q_i, x_i, label)`` over the group's order statistics.

    ``phi`` is evaluated only at points carrying positive weight.
    """
    w = km_weights(group) if weights is None else weights
    total = 0.0
    for i in np.flatnonzero(w.weights > 0):
        value = float(phi(group.sorted_q[i], group.x[i], group.label))
        if not math.isfinite(value):
            raise EstimationError(f"integrand is not finite at q={group.sorted_q[i]!r}")
        total += w.weights[i] * value
    return total


@dataclass(frozen=True)
class GroupSupport:
    label: object
    size: int
    max_q: float
    max_censored: bool
    km_mass: float


@dataclass(frozen=True)
class SupportDiagnostics:
    groups: tuple[GroupSupport, ...]

    @property
    def tau_h(self) -> float:
        """Smallest of the groups' largest observed values."""
        return min(g.max_q for g in self.groups)

    @property
    def defective(self) -> bool:
        return any(g.max_censored for g in self.groups)

    @property
    def warnings(self) -> list[str]:
        return [
            f"group {g.label}: largest observation censored, estimable CDF mass {g.km_mass:.6g}"
            for g in self.groups if g.max_censored
        ]

    def to_dict(self) -> dict:
        return {
            "tau_h": self.tau_h,
            "defective": self.defective,
            "groups": [
                {"label": str(g.label), "size": g.size, "max_q": g.max_q,
                 "max_censored": g.max_censored, "km_mass": g.km_mass}
                for g in self.groups
            ],
            "warnings": self.warnings,
        }


def support_diagnostics(groups) -> SupportDiagnostics:
    out = []
    for g in groups:
        mass = float(product_limit_weights(g.delta).sum())
        out.append(GroupSupport(g.label, g.size, float(g.sorted_q[-1]), not bool(g.delta[-1]), mass))
    if not out:
        raise ValidationError("support diagnostics need at least one group")
    return SupportDiagnostics(tuple(out))

