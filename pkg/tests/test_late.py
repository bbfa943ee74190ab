import numpy as np
import pytest

from twostepkm.data import CensoredSample
from twostepkm.exceptions import ValidationError, WeakInstrumentError
from twostepkm.late import (
    LateEstimator, LateRequest, estimate_complier_cdf, estimate_complier_mean, estimate_kappa, estimate_late,
    estimate_ldte, estimate_lqte,
)
from twostepkm.propensity import PropensitySpec

from oracles import late_cdf_direct, late_direct

LOGIT = PropensitySpec("logit")


def _iv_sample(n, seed, complier_share=0.6, censor=0.0, effect=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    z = (rng.random(n) < 1 / (1 + np.exp(-0.3 * x))).astype(int)
    kind = rng.choice(3, size=n, p=[complier_share, (1 - complier_share) / 2, (1 - complier_share) / 2])
    t = np.where(kind == 0, z, np.where(kind == 1, 1, 0))
    y = x + effect * t + rng.standard_normal(n)
    delta = rng.random(n) >= censor
    return CensoredSample(q=y, delta=delta, x=x[:, None], t=t, z=z)


def test_perfect_compliance_toy():
    s = CensoredSample(q=[2, 4, 1, 3], delta=[1, 1, 1, 1], t=[1, 1, 0, 0], z=[1, 1, 0, 0])
    req = LateRequest(s, LOGIT)
    assert estimate_kappa(req, 1) == pytest.approx(1.0)
    # kappa_0 is negative: only Z = 0 units are untreated
    assert estimate_kappa(req, 0) == pytest.approx(-1.0)
    assert estimate_complier_mean(req, 1) == pytest.approx(3.0)
    assert estimate_late(req).value == pytest.approx(1.0)
    cdf = estimate_complier_cdf(req, 0)
    np.testing.assert_allclose(cdf.jump_points, [1, 3])
    np.testing.assert_allclose(cdf.masses, [0.5, 0.5])


def test_uncensored_matches_direct_ratio():
    s = _iv_sample(400, 1)
    est = LateEstimator(LateRequest(s, LOGIT))
    e = est.propensity_fit.fitted
    for arm in (1, 0):
        assert est.complier_mean(arm) == pytest.approx(late_direct(s.q, s.t, s.z, e, arm), abs=1e-10)
    grid = np.linspace(-2, 3, 9)
    expected = late_cdf_direct(s.q, s.t, s.z, e, 1, grid) - late_cdf_direct(s.q, s.t, s.z, e, 0, grid)
    np.testing.assert_allclose(est.ldte(grid=grid).estimates, expected, atol=1e-10)


def test_complier_cdf_is_rearranged_and_clipped():
    s = _iv_sample(150, 2, complier_share=0.3)
    est = LateEstimator(LateRequest(s, LOGIT))
    for arm in (1, 0):
        cdf = est.complier_cdf(arm)
        assert np.all(np.diff(cdf.cumulative) > 0)
        assert cdf.cumulative[-1] <= 1 + 1e-12
    assert set(est.diagnostics()["clip_magnitude"]) == {"t=1", "t=0"}


def test_weak_instrument():
    # treatment exactly balanced within each instrument arm: both kappas vanish
    n = 400
    t = np.tile([0, 1], n // 2)
    z = np.repeat([0, 1], n // 2)
    s = CensoredSample(q=np.arange(n, dtype=float), delta=np.ones(n), t=t, z=z)
    with pytest.raises(WeakInstrumentError, match="weak first stage"):
        estimate_late(LateRequest(s, LOGIT))


def test_missing_instrument():
    s = CensoredSample(q=[1, 2], delta=[1, 1], t=[0, 1])
    with pytest.raises(ValidationError, match="instrument column required"):
        estimate_late(LateRequest(s, LOGIT))


def test_lqte_and_ldte_with_censoring():
    s = _iv_sample(3000, 4, censor=0.1)
    req = LateRequest(s, LOGIT, tau_grid=[0.25, 0.5, 0.75], y_grid=[0.0, 1.0])
    lq = estimate_lqte(req)
    assert lq.estimates.shape == (3,)
    np.testing.assert_allclose(lq.estimates, 1.0, atol=0.4)
    assert estimate_ldte(req).estimates.shape == (2,)


def test_late_recovers_constant_effect():
    s = _iv_sample(5000, 5, effect=1.0)
    assert estimate_late(LateRequest(s, LOGIT)).value == pytest.approx(1.0, abs=0.15)
