import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostepkm.data import CensoredSample
from twostepkm.exceptions import EstimationError, ValidationError
from twostepkm.km import (
    cumulative_hazard, km_cdf, km_cdf_via_hazard, km_integral, km_weights, order_group,
    product_limit_weights, sort_order, support_diagnostics,
)

from oracles import km_survival_classic, redistribute_to_right


def _group(q, delta, **kw):
    s = CensoredSample(q=q, delta=delta, **kw)
    return s, order_group(s)


@pytest.mark.parametrize("delta, expected", [
    ((1, 0, 1), (1 / 3, 0, 2 / 3)),
    ((1, 1, 0), (1 / 3, 1 / 3, 0)),
    ((1, 1, 1, 1), (0.25,) * 4),
    ((0, 1), (0, 1)),
    ((0, 0), (0, 0)),
])
def test_hand_computed_weights(delta, expected):
    np.testing.assert_allclose(product_limit_weights(np.array(delta, bool)), expected, atol=1e-15)


def test_weights_scaled_by_group_share():
    s = CensoredSample(q=[1, 2, 3, 9, 9, 9], delta=[1, 0, 1, 1, 1, 1], t=[1, 1, 1, 0, 0, 0])
    w = km_weights(order_group(s, s.t == 1))
    assert w.group_fraction == 0.5
    np.testing.assert_allclose(w.weights, [1 / 6, 0, 1 / 3])


def test_ties_put_deaths_before_censorings():
    q = np.array([2.0, 2.0, 1.0, 2.0])
    d = np.array([False, True, True, False])
    order = sort_order(q, d)
    assert list(order) == [2, 1, 0, 3]
    _, g = _group(q, d)
    # censored ties at 2 stay at risk at the death at 2
    np.testing.assert_allclose(product_limit_weights(g.delta), [0.25, 0.25, 0, 0])


def test_selector_forms_agree():
    s = CensoredSample(q=[3, 1, 2, 5], delta=[1, 1, 0, 1], t=[1, 0, 1, 1])
    by_mask = order_group(s, s.t == 1)
    by_callable = order_group(s, lambda obs: obs.t == 1)
    by_index = order_group(s, np.array([0, 2, 3]))
    for g in (by_callable, by_index):
        np.testing.assert_array_equal(g.sorted_q, by_mask.sorted_q)
        np.testing.assert_array_equal(g.original_index, by_mask.original_index)
    with pytest.raises(ValidationError):
        order_group(s, s.q > 100)


def test_concomitants_follow_sort():
    s = CensoredSample(q=[3, 1, 2], delta=[1, 1, 1], x=[[30.0], [10.0], [20.0]])
    g = order_group(s)
    np.testing.assert_array_equal(g.x[:, 0], [10, 20, 30])
    np.testing.assert_array_equal(g.original_index, [1, 2, 0])


def test_km_cdf_defective_and_all_censored():
    _, g = _group([1, 2, 3], [1, 1, 0])
    cdf = km_cdf(g)
    assert cdf.is_defective()
    assert cdf.total_mass == pytest.approx(2 / 3)
    _, g = _group([1, 2], [0, 0])
    with pytest.raises(EstimationError):
        km_cdf(g)
    with pytest.raises(EstimationError):
        km_cdf_via_hazard(g)


def test_cumulative_hazard_hand_values():
    _, g = _group([1, 2, 2, 3, 4], [1, 1, 0, 1, 0])
    h = cumulative_hazard(g)
    np.testing.assert_array_equal(h.locations, [1, 2, 3])
    np.testing.assert_allclose(h.increments, [1 / 5, 1 / 4, 1 / 2])


def test_km_integral_matches_weighted_sum_and_skips_zero_weights():
    s, g = _group([1.0, 2.0, 3.0], [1, 0, 1], x=[[1.0], [5.0], [2.0]])
    calls = []

    def phi(q, x, label):
        calls.append(q)
        return q * x[0]

    total = km_integral(g, phi)
    assert total == pytest.approx(1 / 3 * 1 * 1 + 2 / 3 * 3 * 2)
    assert calls == [1.0, 3.0]
    with pytest.raises(EstimationError):
        km_integral(g, lambda q, x, label: np.inf)


def test_support_diagnostics():
    s = CensoredSample(q=[1, 5, 2, 3], delta=[1, 0, 1, 1], t=[1, 1, 0, 0])
    groups = [order_group(s, s.t == v, label=f"t={v}") for v in (1, 0)]
    diag = support_diagnostics(groups)
    assert diag.tau_h == 3
    assert diag.defective
    assert len(diag.warnings) == 1 and "t=1" in diag.warnings[0]
    assert diag.to_dict()["groups"][0]["km_mass"] == pytest.approx(0.5)


samples = st.integers(1, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 8), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n),
))


@settings(max_examples=300, deadline=None)
@given(samples)
def test_weights_equal_redistribute_to_right(data):
    q, d = np.array(data[0], float), np.array(data[1])
    s, g = _group(q, d)
    w = np.zeros(s.n)
    w[g.original_index] = product_limit_weights(g.delta)
    np.testing.assert_allclose(w, redistribute_to_right(q, d), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(samples)
def test_cdf_matches_classic_survival(data):
    q, d = np.array(data[0], float), np.array(data[1])
    if not d.any():
        return
    _, g = _group(q, d)
    cdf = km_cdf(g)
    for y in np.unique(q):
        value = cdf.cumulative[np.searchsorted(cdf.jump_points, y, side="right") - 1] if y >= cdf.jump_points[0] else 0.0
        assert value == pytest.approx(1 - km_survival_classic(q, d, y), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(samples)
def test_weights_bounded_and_sum_at_most_one(data):
    d = np.array(data[1])
    w = product_limit_weights(d)
    assert np.all(w >= 0)
    assert w.sum() <= 1 + 1e-12
    if d.size and d[-1]:
        assert w.sum() == pytest.approx(1, abs=1e-12)
