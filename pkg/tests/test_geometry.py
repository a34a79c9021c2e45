import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hypball import geometry as geo
from hypball.errors import DegenerateInputError, DomainError, UsageError

CURVS = [0.1, 0.5, 1.0]


def ball_points(rng, n, dim, c, max_frac=0.9):
    d = rng.normal(size=(n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (rng.uniform(0, max_frac, size=(n, 1)) / math.sqrt(c))


@st.composite
def ball_pair(draw, max_frac=0.9):
    c = draw(st.sampled_from(CURVS))
    dim = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    x, y = ball_points(rng, 2, dim, c, max_frac)
    return c, x, y


# ---------------------------------------------------------------- Curvature


def test_curvature_radius():
    curv = geo.Curvature(0.25)
    assert curv.radius == pytest.approx((1 - 1e-3) / 0.5, rel=1e-15)
    assert curv.bound(0.1) == pytest.approx(0.9 / 0.5, rel=1e-15)


@pytest.mark.parametrize("c", [0.0, -1.0, float("nan"), float("inf")])
def test_curvature_rejects_bad_c(c):
    with pytest.raises(UsageError):
        geo.Curvature(c)


def test_curvature_rejects_bad_eps():
    with pytest.raises(UsageError):
        geo.Curvature(1.0, max_norm_eps=1.0)


def test_point_outside_ball_rejected():
    with pytest.raises(DomainError):
        geo.PoincarePoint(np.array([1.0, 0.0]), geo.Curvature(1.0))


# -------------------------------------------------------- conformal factor


def test_conformal_factor_origin():
    for c in CURVS:
        assert geo.conformal_factor(np.zeros(3), c=c) == 2.0


def test_conformal_factor_half_norm():
    x = np.array([math.sqrt(0.5), 0.0])
    expected = float(2 / (1 - mp.mpf(1) * mp.mpf(x[0]) ** 2))
    assert geo.conformal_factor(x, c=1.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(4.0, rel=1e-12)


def test_conformal_factor_euclidean_limit():
    x = np.array([3.0, -4.0, 1.0])
    assert geo.conformal_factor(x, c=1e-8) == pytest.approx(2.0, rel=1e-6)


def test_conformal_factor_non_finite():
    with pytest.raises(DomainError):
        geo.conformal_factor(np.array([np.nan, 0.0]), c=1.0)


# ------------------------------------------------------------ Mobius add


def test_mobius_collinear_example():
    out = geo.mobius_add(np.array([0.5, 0.0]), np.array([0.25, 0.0]), c=1.0)
    # collinear closed form (x + y) / (1 + c x y)
    np.testing.assert_allclose(out, [0.75 / (1 + 0.125), 0.0], rtol=1e-15, atol=0)
    np.testing.assert_allclose(out, [2 / 3, 0.0], rtol=1e-15)


def test_mobius_matches_high_precision_formula():
    rng = np.random.default_rng(1)
    for c in CURVS:
        for x, y in zip(ball_points(rng, 30, 4, c), ball_points(rng, 30, 4, c)):
            ref = oracles.to_float(oracles.mobius_add(x, y, c))
            np.testing.assert_allclose(geo.mobius_add(x, y, c=c), ref, rtol=1e-12, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(ball_pair())
def test_gyro_identities(case):
    c, x, y = case
    zero = np.zeros_like(x)
    assert np.max(np.abs(geo.mobius_add(zero, x, c=c) - x)) <= 1e-9
    assert np.max(np.abs(geo.mobius_add(x, zero, c=c) - x)) <= 1e-9
    assert np.max(np.abs(geo.mobius_add(-x, x, c=c))) <= 1e-9
    assert np.max(np.abs(geo.mobius_add(-x, geo.mobius_add(x, y, c=c), c=c) - y)) <= 1e-9


def test_mobius_not_commutative():
    x, y = np.array([0.5, 0.1]), np.array([-0.2, 0.6])
    a = geo.mobius_add(x, y, c=1.0)
    b = geo.mobius_add(y, x, c=1.0)
    assert np.linalg.norm(a - b) > 1e-3
    assert np.linalg.norm(a) == pytest.approx(np.linalg.norm(b), rel=1e-12)


def test_mobius_dimension_mismatch():
    with pytest.raises(UsageError):
        geo.mobius_add(np.zeros(2), np.zeros(3), c=1.0)


def test_mobius_curvature_mismatch():
    p = geo.PoincarePoint(np.zeros(2), geo.Curvature(1.0))
    q = geo.PoincarePoint(np.zeros(2), geo.Curvature(0.5))
    with pytest.raises(UsageError):
        geo.mobius_add(p, q)


def test_mobius_degenerate_denominator():
    # denominator 1 + 2c<x,y> + c^2|x|^2|y|^2 vanishes for x = -y on the unit sphere (c = 1)
    with pytest.raises(DegenerateInputError):
        geo.mobius_add(np.array([1.0, 0.0]), np.array([-1.0, 0.0]), c=1.0)


def test_mobius_result_projected():
    c = 1.0
    x = np.array([0.99999, 0.0])
    out = geo.mobius_add(x, x, c=c)
    assert np.linalg.norm(out) <= geo.Curvature(c).radius + 1e-15


def test_mobius_points_in_points_out():
    curv = geo.Curvature(0.5)
    p = geo.PoincarePoint(np.array([0.2, 0.3]), curv)
    out = geo.mobius_add(p, -p)
    assert isinstance(out, geo.PoincarePoint)
    np.testing.assert_allclose(out.coords, 0.0, atol=1e-15)


# -------------------------------------------------------------- distance


def test_distance_examples():
    y = np.array([0.5, 0.0])
    assert geo.hyp_distance(np.zeros(2), y, c=1.0) == pytest.approx(float(2 * mp.atanh(mp.mpf("0.5"))), rel=1e-12)
    assert geo.hyp_distance(np.zeros(2), y, c=1.0) == pytest.approx(1.0986123, abs=1e-7)
    assert geo.hyp_distance(y, y, c=1.0) == 0.0


def test_distance_origin_case():
    rng = np.random.default_rng(2)
    for c in CURVS:
        for y in ball_points(rng, 10, 3, c):
            sc = math.sqrt(c)
            expected = 2 / sc * math.atanh(sc * np.linalg.norm(y))
            assert geo.hyp_distance(np.zeros(3), y, c=c) == pytest.approx(expected, rel=1e-12)


def test_distance_matches_literal_formula():
    rng = np.random.default_rng(3)
    for c in CURVS:
        for x, y in zip(ball_points(rng, 30, 3, c), ball_points(rng, 30, 3, c)):
            assert geo.hyp_distance(x, y, c=c) == pytest.approx(float(oracles.distance(x, y, c)), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(ball_pair())
def test_distance_symmetric_nonnegative(case):
    c, x, y = case
    d1, d2 = geo.hyp_distance(x, y, c=c), geo.hyp_distance(y, x, c=c)
    assert d1 == d2
    assert d1 >= 0
    assert geo.hyp_distance(x, x, c=c) == 0.0


def test_triangle_inequality():
    rng = np.random.default_rng(4)
    for c in CURVS:
        x, y, z = (ball_points(rng, 1000, 3, c) for _ in range(3))
        dxz = geo.hyp_distance(x, z, c=c)
        dxy = geo.hyp_distance(x, y, c=c)
        dyz = geo.hyp_distance(y, z, c=c)
        assert np.all(dxz <= dxy + dyz + 1e-9)


def test_distance_euclidean_limit():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 100, 4))
    d = geo.hyp_distance(x, y, c=1e-8)
    np.testing.assert_allclose(d, 2 * np.linalg.norm(x - y, axis=1), rtol=1e-4)


def test_distance_batched_broadcast():
    rng = np.random.default_rng(6)
    a = ball_points(rng, 3, 2, 1.0)
    b = ball_points(rng, 4, 2, 1.0)
    d = geo.hyp_distance(a[:, None, :], b[None, :, :], c=1.0)
    assert d.shape == (3, 4)
    assert d[1, 2] == pytest.approx(geo.hyp_distance(a[1], b[2], c=1.0), rel=1e-14)


# ---------------------------------------------------------------- exp/log


def test_exp_zero_tangent():
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(geo.exp_map(x, np.zeros(2), c=1.0), x)


def test_exp0_example():
    out = geo.exp_map0(np.array([1.0, 0.0]), c=1.0)
    np.testing.assert_allclose(out, [float(mp.tanh(1)), 0.0], rtol=1e-14)
    assert out[0] == pytest.approx(0.7615942, abs=1e-7)


def test_exp_map_origin_base_matches_exp0():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(20, 3))
    np.testing.assert_allclose(geo.exp_map(np.zeros(3), v, c=0.5), geo.exp_map0(v, c=0.5), rtol=1e-13, atol=1e-15)


def test_exp_map_matches_formula():
    rng = np.random.default_rng(8)
    for c in CURVS:
        xs = ball_points(rng, 20, 3, c, 0.7)
        vs = rng.normal(size=(20, 3)) * 0.5
        for x, v in zip(xs, vs):
            ref = oracles.to_float(oracles.exp_map(x, v, c))
            np.testing.assert_allclose(geo.exp_map(x, v, c=c), ref, rtol=1e-10, atol=1e-13)


def test_exp0_euclidean_limit():
    rng = np.random.default_rng(9)
    v = rng.normal(size=(500, 4))
    np.testing.assert_allclose(geo.exp_map0(v, c=1e-8), v, rtol=1e-6)


def test_exp_non_finite():
    with pytest.raises(DomainError):
        geo.exp_map0(np.array([np.inf, 0.0]), c=1.0)


def test_log0_examples():
    np.testing.assert_array_equal(geo.log_map0(np.zeros(3), c=1.0), np.zeros(3))
    y = np.array([float(mp.tanh(1)), 0.0])
    np.testing.assert_allclose(geo.log_map0(y, c=1.0), [1.0, 0.0], rtol=1e-13)


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from(CURVS),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3),
    st.floats(0, 3),
)
def test_log_exp_round_trip(c, direction, length):
    v = np.array(direction)
    n = np.linalg.norm(v)
    v = v / n * length if n > 1e-6 else np.zeros(3)
    # the 1e-3 margin truncates exp0 once sqrt(c)|v| exceeds artanh(1 - 1e-3)
    if math.sqrt(c) * length > math.atanh(0.999) - 0.1:
        return
    np.testing.assert_allclose(geo.log_map0(geo.exp_map0(v, c=c), c=c), v, atol=1e-9)


# ------------------------------------------------------------------- clip


def test_clip_example():
    x = np.array([3.0, 4.0])
    out = geo.clip_to_ball(x, 0.1, c=0.1)
    expected = float((1 - mp.mpf("0.1")) / mp.sqrt(mp.mpf("0.1")))
    assert np.linalg.norm(out) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(2.8460499, abs=1e-7)


def test_clip_noop_and_zero():
    x = np.array([0.5, 0.5])
    np.testing.assert_array_equal(geo.clip_to_ball(x, 0.1, c=0.1), x)
    np.testing.assert_array_equal(geo.clip_to_ball(np.zeros(4), 0.1, c=0.1), np.zeros(4))


def test_clip_alpha_below_margin_uses_margin():
    out = geo.clip_to_ball(np.array([10.0]), 0.0, c=1.0)
    assert out[0] == pytest.approx(1 - 1e-3, rel=1e-15)


@pytest.mark.parametrize("alpha", [-0.1, 1.0])
def test_clip_alpha_range(alpha):
    with pytest.raises(UsageError):
        geo.clip_to_ball(np.ones(2), alpha, c=1.0)


@settings(max_examples=300, deadline=None)
@given(
    st.sampled_from(CURVS + [1e-3, 10.0]),
    st.floats(0, 0.99),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=5),
)
def test_clip_bound_property(c, alpha, coords):
    out = geo.clip_to_ball(np.array(coords), alpha, c=c)
    assert np.linalg.norm(out) <= (1 - alpha) / math.sqrt(c) + 1e-12


def test_clip_returns_point_type():
    out = geo.clip_to_ball(geo.TangentVector(np.array([10.0, 0.0])), 0.1, c=1.0)
    assert isinstance(out, geo.PoincarePoint)
