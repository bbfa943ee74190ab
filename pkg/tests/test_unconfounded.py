import numpy as np
import pytest

from twostepkm.data import CensoredSample
from twostepkm.exceptions import IdentificationError, ValidationError
from twostepkm.propensity import PropensitySpec
from twostepkm.unconfounded import (
    UnconfoundedEstimator, UnconfoundedRequest, estimate_ate, estimate_dte, estimate_potential_cdf, estimate_qte,
)

from oracles import ipw_arm, ipw_quantile

LOGIT = PropensitySpec("logit")


def _sample(n, seed, censor=0.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    t = (rng.random(n) < 1 / (1 + np.exp(-0.5 * x))).astype(int)
    y = x + t + rng.standard_normal(n)
    delta = rng.random(n) >= censor
    return CensoredSample(q=y, delta=delta, x=x[:, None], t=t)


def test_toy_constant_propensity():
    s = CensoredSample(q=[2, 4, 1, 1], delta=[1, 1, 1, 1], t=[1, 1, 0, 0])
    cdf = estimate_potential_cdf(UnconfoundedRequest(s, LOGIT), 1)
    np.testing.assert_allclose(cdf.jump_points, [2, 4])
    np.testing.assert_allclose(cdf.masses, [0.5, 0.5])
    assert estimate_ate(UnconfoundedRequest(s, LOGIT)).value == pytest.approx(2.0)
    qte = estimate_qte(UnconfoundedRequest(s, LOGIT, tau_grid=[0.25, 0.5, 0.75]))
    np.testing.assert_allclose(qte.estimates, [1, 1, 3])


def test_uncensored_matches_direct_ipw():
    s = _sample(300, 1)
    est = UnconfoundedEstimator(UnconfoundedRequest(s, LOGIT))
    p = est.propensity_fit.fitted
    grid = np.linspace(-2, 3, 11)
    m1, f1 = ipw_arm(s.q, s.t, p, 1, grid)
    m0, f0 = ipw_arm(s.q, s.t, p, 0, grid)
    assert est.ate().value == pytest.approx(m1 - m0, abs=1e-10)
    np.testing.assert_allclose(est.dte(grid=grid).estimates, f1 - f0, atol=1e-10)
    taus = [0.1, 0.5, 0.9]
    expected = [ipw_quantile(s.q, s.t, p, 1, u) - ipw_quantile(s.q, s.t, p, 0, u) for u in taus]
    np.testing.assert_allclose(est.qte(grid=taus).estimates, expected, atol=1e-10)


def test_masses_are_not_normalised():
    s = _sample(200, 2)
    est = UnconfoundedEstimator(UnconfoundedRequest(s, LOGIT))
    p = est.propensity_fit.fitted
    mass = est.potential_cdf(1).total_mass
    assert mass == pytest.approx(np.sum(s.t / p) / s.n)
    assert mass != pytest.approx(1.0, abs=1e-6)


def test_defective_mean_needs_override():
    s = CensoredSample(q=[1, 3, 2, 4, 0.5, 1.5], delta=[1, 0, 1, 1, 1, 1], t=[1, 1, 1, 0, 0, 0])
    s = s.replace(q=[1, 5, 2, 4, 0.5, 1.5])
    with pytest.raises(IdentificationError, match="t=1"):
        estimate_ate(UnconfoundedRequest(s, LOGIT))
    value = estimate_ate(UnconfoundedRequest(s, LOGIT, allow_defective=True)).value
    assert np.isfinite(value)


def test_auto_grids_respect_support():
    s = _sample(400, 3, censor=0.2)
    est = UnconfoundedEstimator(UnconfoundedRequest(s, LOGIT))
    grid = est.y_grid()
    assert grid.max() < est.support.tau_h
    taus = est.tau_grid()
    assert taus.max() <= est.quantile_bound


def test_explicit_grid_checks():
    s = _sample(200, 4)
    est = UnconfoundedEstimator(UnconfoundedRequest(s, LOGIT, y_grid=[0.0, 1e6]))
    with pytest.raises(IdentificationError, match="beyond"):
        est.dte()
    est = UnconfoundedEstimator(UnconfoundedRequest(s, LOGIT, tau_grid=[0.5, 0.2]))
    with pytest.raises(IdentificationError, match="ascending"):
        est.qte()


def test_quantile_beyond_identified_region_names_tau():
    s = CensoredSample(q=[1, 2, 3, 1, 2, 3], delta=[1, 1, 0, 1, 1, 1], t=[1, 1, 1, 0, 0, 0])
    req = UnconfoundedRequest(s, LOGIT, tau_grid=[0.5, 0.9], allow_defective=True)
    with pytest.raises(IdentificationError, match="tau=0.9"):
        estimate_qte(req)


def test_requires_both_arms():
    s = CensoredSample(q=[1, 2, 3], delta=[1, 1, 1], t=[1, 1, 1])
    with pytest.raises(ValidationError, match="t=0"):
        estimate_ate(UnconfoundedRequest(s, LOGIT))


def test_ate_consistency_with_censoring():
    # random censoring independent of everything: 2SKM is consistent
    rng = np.random.default_rng(5)
    n = 20_000
    x = rng.standard_normal(n)
    t = (rng.random(n) < 1 / (1 + np.exp(-0.5 * x))).astype(int)
    y = x + t + rng.standard_normal(n)
    c = rng.uniform(-3, 10, n)
    s = CensoredSample(q=np.minimum(y, c), delta=y <= c, x=x[:, None], t=t)
    curve = estimate_dte(UnconfoundedRequest(s, PropensitySpec("logit"), y_grid=[-1.0, 0.0, 1.0]))
    from scipy.stats import norm
    sd = np.sqrt(2)
    truth = norm.cdf([-1, 0, 1], 1, sd) - norm.cdf([-1, 0, 1], 0, sd)
    np.testing.assert_allclose(curve.estimates, truth, atol=0.03)
