"""Operations on step CDFs: evaluation, quantiles, rearrangement, composition."""

from __future__ import annotations

import logging
import warnings

import numpy as np

from .data import EPS_NUM, EffectCurve, StepDistribution
from .exceptions import EstimationError, IdentificationError

logger = logging.getLogger(__name__)

#: Slack used when comparing accumulated masses with a quantile level.
#: Sums of product-limit weights carry rounding error of a few ulps, which
#: must not move a quantile past a tie in the cumulative masses.
INVERSE_TOL = 1e-12


def cdf_eval(dist: StepDistribution, y):
    """Right-continuous CDF value(s) at ``y``."""
    y_arr = np.asarray(y, dtype=float)
    idx = np.searchsorted(dist.jump_points, y_arr, side="right")
    cum = np.r_[0.0, dist.cumulative]
    out = cum[idx]
    return float(out) if out.ndim == 0 else out


def generalized_inverse(dist: StepDistribution, tau):
    """Smallest atom ``y`` with ``F(y) >= tau``.

    Levels above the total mass raise :class:`IdentificationError`; the
    comparison uses :data:`INVERSE_TOL` so that a level equal to an
    accumulated mass up to rounding hits that atom. A level of zero (or
    below) maps to the first atom.
    """
    tau_arr = np.asarray(tau, dtype=float)
    cum = dist.cumulative
    too_high = tau_arr > cum[-1] + INVERSE_TOL
    if np.any(too_high):
        bad = np.atleast_1d(tau_arr)[np.atleast_1d(too_high)][0]
        raise IdentificationError(
            f"quantile beyond identified region: tau={bad:.6g} exceeds estimated mass {cum[-1]:.6g}"
        )
    idx = np.searchsorted(cum, tau_arr - INVERSE_TOL, side="left")
    idx = np.minimum(idx, cum.size - 1)
    out = dist.jump_points[idx]
    return float(out) if out.ndim == 0 else out


def rearrange(curve: EffectCurve) -> EffectCurve:
    """Monotone rearrangement: the estimates sorted in ascending order."""
    return EffectCurve(
        grid=curve.grid,
        estimates=np.sort(curve.estimates, kind="stable"),
        estimand_kind=curve.estimand_kind,
        band_halfwidth=curve.band_halfwidth,
        alpha=curve.alpha,
        diagnostics=curve.diagnostics,
    )


def monotone_distribution(points, values, clip: bool = False) -> StepDistribution:
    """Step CDF whose value at ``points[i]`` is the i-th smallest of ``values``.

    ``values`` are CDF estimates at the ascending ``points`` (zero to the
    left of the first point). With ``clip`` the rearranged values are
    confined to ``[0, 1]`` before atoms are formed.
    """
    points = np.asarray(points, dtype=float)
    v = np.sort(np.asarray(values, dtype=float))
    if clip:
        lo, hi = v.min(initial=0.0), v.max(initial=1.0)
        if lo < 0 or hi > 1:
            logger.debug("clipped rearranged CDF: min %.3g, max %.3g", lo, hi)
        v = np.clip(v, 0.0, 1.0)
    elif v.size and v[0] < 0:
        raise EstimationError("rearranged CDF starts below zero; pass clip=True")
    masses = np.diff(np.r_[0.0, v])
    keep = masses > 0
    if not keep.any():
        raise EstimationError("estimated CDF carries no positive mass")
    return StepDistribution(points[keep], masses[keep])


def compose_counterfactual(inner: StepDistribution, outer: StepDistribution, y, clamp: bool = False):
    """``outer^{-1}(inner(y))``: the outer-quantile of the inner CDF level at ``y``.

    Where ``inner(y) == 0`` the result is the first atom of ``outer`` (the
    infimum taken over the observed support rather than minus infinity).
    Levels above the mass of a defective ``outer`` raise, unless ``clamp``
    is set, in which case they map to its last atom with a warning.
    """
    u = np.asarray(cdf_eval(inner, y))
    if clamp:
        over = u > outer.total_mass + INVERSE_TOL
        if np.any(over):
            warnings.warn(
                f"{int(np.count_nonzero(over))} level(s) above defective mass {outer.total_mass:.6g} "
                "mapped to the last atom",
                stacklevel=2,
            )
            u = np.minimum(u, outer.total_mass)
    n_boundary = int(np.count_nonzero(u <= 0))
    if n_boundary:
        logger.debug("composition at level 0 for %d point(s); using first atom %.6g", n_boundary, outer.jump_points[0])
    out = np.asarray(generalized_inverse(outer, u))
    return float(out) if out.ndim == 0 else out


def km_mean(dist: StepDistribution, allow_defective: bool = False) -> float:
    """Mean of the atoms weighted by their masses.

    A defective distribution (mass short of one) only has a truncated mean;
    this raises unless ``allow_defective`` is set, in which case a warning
    is issued and the truncated value returned.
    """
    if abs(dist.total_mass - 1.0) > EPS_NUM:
        if not allow_defective:
            raise IdentificationError(
                f"distribution has total mass {dist.total_mass:.6g}; mean is only identified up to truncation"
            )
        warnings.warn(f"truncated mean of a distribution with mass {dist.total_mass:.6g}", stacklevel=2)
    return float(np.dot(dist.jump_points, dist.masses))
