import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from galamm.splines import absorb_sum_to_zero, build_basis, crs_design, penalty, place_knots, to_mixed


def test_matches_natural_cubic_spline(rng):
    x = np.sort(rng.uniform(-1, 3, 200))
    B = build_basis(x, 7)
    b = rng.normal(size=7)
    cs = CubicSpline(B.knots, b, bc_type="natural")
    np.testing.assert_allclose(B.design @ b, cs(x), atol=1e-12)
    # interpolation property b_j(knot_k) = delta_jk
    np.testing.assert_allclose(crs_design(B.knots, B.knots), np.eye(7), atol=1e-12)


def test_penalty_is_integrated_squared_curvature(rng):
    x = rng.uniform(0, 10, 100)
    B = build_basis(x, 9)
    b = rng.normal(size=9)
    cs = CubicSpline(B.knots, b, bc_type="natural")
    ref = sum(quad(lambda t: cs(t, 2) ** 2, a, c)[0] for a, c in zip(B.knots[:-1], B.knots[1:]))
    assert b @ penalty(B) @ b == pytest.approx(ref, rel=1e-10)


def test_linear_extrapolation(rng):
    x = rng.uniform(0, 1, 50)
    B = build_basis(x, 6)
    b = rng.normal(size=6)
    cs = CubicSpline(B.knots, b, bc_type="natural")
    lo, hi = B.knots[0], B.knots[-1]
    out = B.evaluate(np.array([lo - 0.5, hi + 0.25])) @ b
    assert out[0] == pytest.approx(cs(lo) - 0.5 * cs(lo, 1), rel=1e-10)
    assert out[1] == pytest.approx(cs(hi) + 0.25 * cs(hi, 1), rel=1e-10)


def test_knots_and_errors():
    k = place_knots(np.arange(11.0), 3)
    np.testing.assert_allclose(k, [0, 5, 10])
    with pytest.raises(ValueError):
        place_knots([1.0, 1.0, 2.0], 3)
    with pytest.raises(ValueError):
        place_knots(np.arange(5.0), 2)


def test_sum_to_zero_and_mixed_form(rng):
    x = rng.uniform(0, 1, 80)
    B = absorb_sum_to_zero(build_basis(x, 8))
    assert B.K == 7 and B.design.shape == (80, 7)
    np.testing.assert_allclose(B.design.sum(axis=0), 0, atol=1e-10)
    with pytest.raises(ValueError):
        absorb_sum_to_zero(B)
    M = to_mixed(B)
    # one unpenalised (linear) direction remains after the constraint
    assert M.null_dim == 1 and M.r == 6
    np.testing.assert_allclose(M.to_basis_R.T @ B.S @ M.to_basis_R, np.eye(6), atol=1e-9)
    np.testing.assert_allclose(B.S @ M.to_basis_F, 0, atol=1e-9)
    # the null space is linear in x
    f = B.design @ M.to_basis_F[:, 0]
    c = np.polyfit(x, f, 1)
    np.testing.assert_allclose(np.polyval(c, x), f, atol=1e-9)
    # design blocks agree with the reparametrised coefficients
    bF, z = rng.normal(size=1), rng.normal(size=6)
    np.testing.assert_allclose(M.X_F @ bF + M.X_R @ z, B.design @ M.coefficients(bF, z), atol=1e-10)
    XF, XR = M.design_at(x)
    np.testing.assert_allclose(XF, M.X_F, atol=1e-12)
    np.testing.assert_allclose(XR, M.X_R, atol=1e-10)


def test_unconstrained_null_space_dim(rng):
    M = to_mixed(build_basis(rng.uniform(size=40), 5))
    assert M.null_dim == 2 and M.r == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_property_penalty_psd_and_partition_of_unity(K, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, 60)
    B = build_basis(x, K)
    ev = np.linalg.eigvalsh(B.S)
    assert ev.min() > -1e-9 * max(1.0, ev.max())
    # constants and linear functions are exactly reproduced and unpenalised
    np.testing.assert_allclose(B.design.sum(axis=1), 1.0, atol=1e-10)
    lin = B.knots.copy()
    np.testing.assert_allclose(B.design @ lin, x, atol=1e-9)
    assert lin @ B.S @ lin == pytest.approx(0.0, abs=1e-8 * (1 + ev.max()))
