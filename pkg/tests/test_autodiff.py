import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from galamm import autodiff as ad
from galamm.autodiff import Dual, NonDifferentiableError


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_hess(f, x, h=1e-4):
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def generic(x, lib):
    a, b, c = x[0], x[1], x[2]
    return lib.exp(a * b) + lib.log(c) * a - lib.sqrt(c) / (1.0 + b * b) + lib.log1p(c * c) + lib.softplus(a - c) * lib.expit(b)


class _np:
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    sqrt = staticmethod(np.sqrt)
    log1p = staticmethod(np.log1p)

    @staticmethod
    def softplus(x):
        return np.logaddexp(0.0, x)

    @staticmethod
    def expit(x):
        return 1.0 / (1.0 + np.exp(-x))


def test_gradient_and_hessian_match_fd():
    x = np.array([0.3, -0.7, 1.4])
    g = ad.grad(lambda d: generic(d, ad), x)
    np.testing.assert_allclose(g, fd_grad(lambda v: generic(v, _np), x), rtol=1e-7)
    H = ad.hessian(lambda d: generic(d, ad), x)
    np.testing.assert_allclose(H, fd_hess(lambda v: generic(v, _np), x), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(ad.hessian_diagonal(lambda d: generic(d, ad), x), np.diag(H), rtol=1e-12)


def test_hessian_subset():
    x = np.array([0.3, -0.7, 1.4])
    H = ad.hessian(lambda d: generic(d, ad), x)
    Hs = ad.hessian(lambda d: generic(d, ad), x, which=[0, 2])
    np.testing.assert_allclose(Hs, H[np.ix_([0, 2], [0, 2])], rtol=1e-12)


def test_matmul_and_sparse():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 3))
    M = sp.csr_matrix(A)

    def f(d):
        y = A @ d
        z = ad.spmatmul(M, d * d)
        return (y * y).sum() + z.sum()

    x = rng.normal(size=3)
    ref = lambda v: np.sum((A @ v) ** 2) + np.sum(A @ (v * v))  # noqa: E731
    np.testing.assert_allclose(ad.grad(f, x), fd_grad(ref, x), rtol=1e-7)
    np.testing.assert_allclose(ad.hessian(f, x), 2 * A.T @ A + 2 * np.diag(A.sum(axis=0)), rtol=1e-10, atol=1e-12)


def test_arithmetic_rules():
    x = Dual.seed(np.array([2.0, 3.0]))
    a, b = x[0], x[1]
    q = a / b
    assert q.val == pytest.approx(2 / 3)
    np.testing.assert_allclose(q.d1, [1 / 3, -2 / 9])
    p = a**3
    np.testing.assert_allclose(p.d1, [12.0, 0.0])
    r = 1.0 - a
    np.testing.assert_allclose(r.d1, [-1.0, 0.0])
    s = 5.0 / b
    np.testing.assert_allclose(s.d1, [0.0, -5 / 9])


def test_plain_passthrough():
    assert ad.exp(0.0) == 1.0
    assert ad.value(3.0) == 3.0
    assert ad.grad(lambda d: 1.0, np.ones(2)).tolist() == [0.0, 0.0]


def test_nondifferentiable_points():
    x = Dual.seed(np.array([0.0]))
    with pytest.raises(NonDifferentiableError):
        ad.abs(x)
    with pytest.raises(NonDifferentiableError):
        ad.sqrt(x)
    with pytest.raises(ZeroDivisionError):
        ad.reciprocal(x)
    with pytest.raises(ValueError):
        Dual.seed(np.zeros(2)) + Dual.seed(np.zeros(3))[:2]


def test_softplus_expit_extreme():
    x = Dual.seed(np.array([-800.0, 0.0, 800.0]))
    sp_ = ad.softplus(x)
    ex = ad.expit(x)
    assert np.all(np.isfinite(sp_.c)) and np.all(np.isfinite(ex.c))
    np.testing.assert_allclose(sp_.val, [0.0, np.log(2), 800.0], atol=1e-12)
    np.testing.assert_allclose(np.diag(ex.d1), [0.0, 0.25, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.floats(0.2, 3.0),
)
def test_property_product_rule_and_symmetry(v, c):
    x = np.array([v[0], v[1], c])
    f = lambda d: generic(d, ad)  # noqa: E731
    H = ad.hessian(f, x)
    np.testing.assert_allclose(H, H.T, atol=1e-12)
    # product rule: d(fg) = f dg + g df
    g = lambda d: d[0] * d[1] + ad.exp(d[2] * 0.1)  # noqa: E731
    fg = ad.grad(lambda d: f(d) * g(d), x)
    fv = generic(x, _np)
    gv = x[0] * x[1] + np.exp(0.1 * x[2])
    np.testing.assert_allclose(fg, fv * ad.grad(g, x) + gv * ad.grad(f, x), rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30))
def test_property_unary_identities(t):
    x = Dual.seed(np.array([t]))
    e = ad.expit(x)
    # expit' = expit (1 - expit), softplus' = expit
    np.testing.assert_allclose(e.d1[0, 0], e.val[0] * (1 - e.val[0]), rtol=1e-10, atol=1e-300)
    np.testing.assert_allclose(ad.softplus(x).d1[0, 0], e.val[0], rtol=1e-10, atol=1e-300)
    y = ad.exp(ad.log(ad.exp(x)))
    np.testing.assert_allclose(y.d1[0, 0], np.exp(t), rtol=1e-12)
