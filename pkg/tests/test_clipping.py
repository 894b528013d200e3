import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heavyclip.clipping import (DEFAULT_GRID_LAMBDAS, PreconditionError, clip, clip_bound_grid, clip_bounds,
                                decompose_clip, default_grid_models, exact_clip_moments,
                                tight_bias_constant_ratio, verify_clip_bounds)
from heavyclip.core import RngStream
from heavyclip.noise import clipped_moment_oracle_1d, gaussian, pareto_sphere, sample_noise, two_point


def test_clip_examples():
    np.testing.assert_array_equal(clip([3.0, 4.0], 10.0), [3.0, 4.0])
    np.testing.assert_allclose(clip([3.0, 4.0], 2.5), [1.5, 2.0], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(clip([0.0, 0.0], 1.0), [0.0, 0.0])


def test_clip_infinite_level_is_identity():
    g = np.array([1e200, -3.0])
    np.testing.assert_array_equal(clip(g, math.inf), g)


def test_clip_norm_overflow():
    out = clip(np.array([1e200, 1e200]), 2.0)
    np.testing.assert_allclose(out, [math.sqrt(2.0), math.sqrt(2.0)], rtol=1e-15)


def test_clip_rows_with_per_row_levels():
    g = np.array([[3.0, 4.0], [3.0, 4.0]])
    out = clip(g, np.array([10.0, 2.5]))
    np.testing.assert_allclose(out, [[3.0, 4.0], [1.5, 2.0]], atol=1e-15)


def test_clip_errors():
    with pytest.raises(ValueError, match="non-finite"):
        clip([np.inf, 0.0], 1.0)
    with pytest.raises(ValueError, match="non-finite"):
        clip([np.nan], 1.0)
    with pytest.raises(ValueError, match="positive"):
        clip([1.0], 0.0)
    with pytest.raises(ValueError, match="positive"):
        clip([1.0], -2.0)


def test_clip_contraction_and_direction_random():
    rng = np.random.default_rng(0)
    n, d = 10_000, 5
    g = rng.standard_normal((n, d)) * np.exp(rng.uniform(-10, 10, (n, 1)))
    lam = np.exp(rng.uniform(-10, 10, n))
    out = clip(g, lam)
    gn = np.linalg.norm(g, axis=1)
    target = np.minimum(gn, lam)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), target, rtol=1e-14)
    np.testing.assert_allclose(out * gn[:, None], g * target[:, None], rtol=1e-14, atol=0)


finite = st.floats(min_value=-1e100, max_value=1e100, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.floats(min_value=1e-100, max_value=1e100))
def test_clip_properties(g, lam):
    out = clip(g, lam)
    gn = float(np.linalg.norm(g))
    on = float(np.linalg.norm(out))
    assert on <= lam * (1 + 1e-14)
    assert on == pytest.approx(min(gn, lam), rel=1e-13, abs=1e-300)
    # positively collinear: same signs, proportional
    assert np.all(out * g >= 0)
    if gn > 0:
        # errors are relative to the vector, not to each (possibly tiny) coordinate
        np.testing.assert_allclose(out * gn, g * min(gn, lam), rtol=0, atol=1e-13 * gn * min(gn, lam))


def test_decomposition_sums_to_theta():
    rng = RngStream(3)
    model = two_point(100.0, 1e-3, 1.5)
    g = np.array([0.4, -0.2])
    for _ in range(50):
        xi = sample_noise(model, 2, rng)
        dec = decompose_clip(g, xi, 1.0, model)
        assert dec.exact_conditional_mean
        np.testing.assert_array_equal(dec.theta, dec.theta_u + dec.theta_b)
        assert np.linalg.norm(dec.theta_u) <= 2.0
    expected_bias = clipped_moment_oracle_1d(model, 0.4, 1.0).bias
    # the noise only moves the first axis, but clipping couples the axes through the norm
    assert dec.theta_b[0] != 0.0 and abs(expected_bias) > 0


def test_decomposition_monte_carlo_path():
    model = gaussian(1.0)
    dec = decompose_clip(np.array([0.1, 0.2, 0.3]), np.array([3.0, 0.0, 0.0]), 1.0, model, rng=RngStream(4))
    assert not dec.exact_conditional_mean
    np.testing.assert_allclose(dec.theta, dec.theta_u + dec.theta_b, atol=1e-15)
    with pytest.raises(ValueError, match="rng"):
        decompose_clip(np.zeros(3), np.zeros(3), 1.0, model)


def test_exact_moments_match_oracle_in_one_dimension():
    for model in (gaussian(1.0), pareto_sphere(1.8, 1.5, 1.0), two_point(10.0, 0.01, 2.0)):
        G = np.array([[0.0], [0.3], [-0.45]])
        mom = exact_clip_moments(model, G, 1.0, Z=(np.ones((3, 1)) * 2.0,))
        for i, g in enumerate(G[:, 0]):
            ref = clipped_moment_oracle_1d(model, g, 1.0)
            assert mom.mean[i, 0] == pytest.approx(ref.mean_clipped, abs=1e-12)
            assert mom.u_sq[i] == pytest.approx(ref.u_second_moment, abs=1e-12)
            assert mom.z_sq[0][i] == pytest.approx(4.0 * ref.u_second_moment, abs=1e-11)


def test_exact_moments_refuse_continuous_multidimensional():
    with pytest.raises(ValueError, match="no exact"):
        exact_clip_moments(gaussian(1.0), np.zeros((1, 2)), 1.0)


def test_verify_noiseless():
    rep = verify_clip_bounds(gaussian(0.0), 0.3, 1.0, rng=RngStream(1))
    assert rep.bias_norm == 0.0 and rep.u_sq_moment == 0.0
    assert rep.passed


def test_verify_two_point_example():
    rep = verify_clip_bounds(two_point(100.0, 1e-3, 1.5), 0.4, 1.0, rng=RngStream(1))
    assert rep.bias_norm == pytest.approx(0.0004, abs=1e-15)
    assert rep.bias_bound == pytest.approx(4.0, rel=1e-12)
    assert rep.method == "enumeration"
    assert rep.passed
    assert tuple(rep.to_dict()) == ("bias_norm", "bias_bound", "u_sq_moment", "u_sq_bound", "u_norm_max", "pass")


def test_verify_pareto_sweep_and_scaling_shape():
    model = pareto_sphere(1.8, 1.5, 1.0)
    ratios, tail_ratios = [], []
    for k in range(11):
        lam = 2.0**k
        rep = verify_clip_bounds(model, lam / 2, lam, rng=RngStream(5, k))
        assert rep.passed, (lam, rep)
        assert rep.method == "quadrature"
        ratios.append(rep.bias_scaling_ratio)
        tail_ratios.append(rep.bias_norm / lam ** (1.0 - model.alpha))
        assert tight_bias_constant_ratio(model, rep) <= 1.0
    # the bound's lam^(1-p) shape is an envelope: the true bias falls off like
    # lam^(1-alpha), which is faster since alpha > p
    assert all(b <= a for a, b in zip(ratios, ratios[1:]))
    assert max(tail_ratios[6:]) / min(tail_ratios[6:]) < 1.05


def test_verify_precondition():
    with pytest.raises(PreconditionError, match=r"\|\|grad\|\| <= lambda/2"):
        verify_clip_bounds(gaussian(1.0), 0.6, 1.0)
    with pytest.raises(ValueError, match="1e5"):
        verify_clip_bounds(gaussian(1.0), 0.1, 1.0, n_mc=1000)


@pytest.mark.parametrize("model", [gaussian(1.0), pareto_sphere(2.5, 1.5, 1.0)])
def test_verify_multidimensional_monte_carlo(model):
    rep = verify_clip_bounds(model, 0.5, 1.0, rng=RngStream(6), dim=3)
    assert rep.method == "monte-carlo"
    assert rep.bias_se > 0 and rep.u_sq_se > 0
    assert rep.passed
    assert rep.u_norm_max <= 2.0


def test_two_point_monotone_tradeoff():
    model = two_point(100.0, 1e-3, 1.5)
    g = 0.5
    lams = [2.0**k for k in range(-3, 12)]
    res = [clipped_moment_oracle_1d(model, g, lam) for lam in lams]
    u = [r.u_second_moment for r in res]
    assert all(b >= a for a, b in zip(u, u[1:]))
    b = [abs(r.bias) for lam, r in zip(lams, res) if lam >= 2 * g]
    assert all(y <= x * (1 + 1e-12) for x, y in zip(b, b[1:]))
    assert b[-1] < 1e-15 < b[0]


def test_clip_bounds_formula():
    model = pareto_sphere(1.8, 1.5, 2.0)
    bias, var = clip_bounds(model, 9.0)
    assert bias == pytest.approx(4 * 2.0**1.5 * 9.0**-0.5)
    assert var == pytest.approx(16 * 2.0**1.5 * 9.0**0.5)


def test_default_grid_passes():
    rows = clip_bound_grid(default_grid_models(), DEFAULT_GRID_LAMBDAS, seed=1)
    assert len(rows) == 36
    assert all(rep.passed for _, rep in rows)


def test_grid_is_order_independent():
    models = default_grid_models()
    full = clip_bound_grid(models, (1.0, 8.0), seed=2)
    # the Monte-Carlo max of the first model does not depend on what else is swept
    alone = clip_bound_grid(models[:1], (1.0, 8.0), seed=2)
    assert [r.to_dict() for _, r in full[:2]] == [r.to_dict() for _, r in alone]
