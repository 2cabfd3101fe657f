import numpy as np
import pytest
from scipy.stats import chi2, norm

from galamm import aic, fit, lrt, result_at, smooth_bands, variance_components
from galamm.assembly import lower
from galamm.inference import edf, edf_penalized, latent_trajectory_bands, parameter_table, posterior_argmax
from galamm.modelspec import parse_spec
from galamm.splines import penalty

from conftest import make_dataset, pure_gam, random_intercept_data, random_intercept_spec, two_item_factor_model


def pls_fit(model, lam):
    """Penalised least squares on [1, basis] with penalty lam * S on the basis block."""
    term = model.smooths[0]
    B = term.mixed.basis
    X = np.column_stack([np.ones(model.n), B.design])
    P = np.zeros((X.shape[1], X.shape[1]))
    P[1:, 1:] = penalty(B)
    A = X.T @ X + lam * P
    coef = np.linalg.solve(A, X.T @ model.y)
    return coef, X, P, A


def engine_basis_coef(f):
    m = f.model
    term = m.smooths[0]
    bF = f.params[m.layout.blocks["beta"]][term.beta_cols]
    bR = f.parts()["theta"][term.theta_index] * f.u_hat[term.u_cols]
    return term.mixed.coefficients(bF, bR)


def test_gam_equivalence_free_dispersion(rng):
    model = pure_gam(rng)
    f = fit(model)
    assert f.converged
    phi = f.get("phi[d]")
    psi = model.psi_blocks(f.params)["s"]
    coef, *_ = pls_fit(model, phi / psi)
    np.testing.assert_allclose(engine_basis_coef(f), coef[1:], atol=1e-6)
    assert f.get("int") == pytest.approx(coef[0], abs=1e-6)


def test_edf_matches_dense_trace(rng):
    model = pure_gam(rng, k=7)
    f = fit(model)
    lam = f.get("phi[d]") / model.psi_blocks(f.params)["s"]
    _, X, P, A = pls_fit(model, lam)
    F = np.linalg.solve(A, X.T @ X)
    assert edf("s", f) == pytest.approx(np.trace(F[1:, 1:]), rel=1e-8)
    assert f.edf["s"] == pytest.approx(edf("s", f))


def test_edf_limits(rng):
    model = pure_gam(rng, k=8)
    f = fit(model)
    j = model.layout.index("theta[smooth:s]")
    lo = f.params.copy()
    lo[j] = 1e-7
    hi = f.params.copy()
    hi[j] = 1e5
    assert edf("s", result_at(model, lo, vcov=f.vcov)) == pytest.approx(1.0, abs=1e-6)
    assert edf("s", result_at(model, hi, vcov=f.vcov)) == pytest.approx(7.0, abs=1e-4)
    # the plain penalised trace has the same limits on the constrained basis alone
    B = model.smooths[0].mixed.basis
    assert edf_penalized(B.design, B.S, 1e-10) == pytest.approx(7.0, abs=1e-5)


def test_band_standard_errors_match_bayesian_covariance(rng):
    model = pure_gam(rng)
    f = fit(model)
    phi = f.get("phi[d]")
    lam = phi / model.psi_blocks(f.params)["s"]
    coef, X, P, A = pls_fit(model, lam)
    Vb = phi * np.linalg.inv(A)
    grid = np.linspace(0.05, 0.95, 15)
    est = smooth_bands(f, "s", grid, n_sim=4000, seed=3)
    Bg = model.smooths[0].mixed.basis.evaluate(grid)
    np.testing.assert_allclose(est.fhat, Bg @ coef[1:], atol=1e-6)
    np.testing.assert_allclose(est.se, np.sqrt(np.einsum("ij,jk,ik->i", Bg, Vb[1:, 1:], Bg)), rtol=1e-6)
    z = norm.ppf(0.975)
    np.testing.assert_allclose(est.hi_pt - est.lo_pt, 2 * z * est.se)
    assert est.critical >= z
    assert np.all(est.lo_sim <= est.lo_pt) and np.all(est.hi_sim >= est.hi_pt)


def test_band_single_point_and_determinism(rng):
    model = pure_gam(rng)
    f = fit(model)
    one = smooth_bands(f, "s", [0.5], n_sim=100, seed=1)
    assert one.critical == pytest.approx(norm.ppf(0.975))
    a = smooth_bands(f, "s", np.linspace(0, 1, 10), n_sim=2000, seed=7)
    b = smooth_bands(f, "s", np.linspace(0, 1, 10), n_sim=2000, seed=7)
    assert a.critical == b.critical
    with pytest.raises(KeyError):
        smooth_bands(f, "nope", [0.5])


def test_posterior_argmax_near_peak(rng):
    model = pure_gam(rng, n=300, sigma=0.1)
    f = fit(model)
    locs = posterior_argmax(f, "s", np.linspace(0, 1, 101), n_sim=500)
    assert abs(np.median(locs) - 0.25) < 0.05


def test_aic_and_lrt(rng):
    spec = random_intercept_spec()
    cl = np.repeat(np.arange(30), 4)
    y = rng.normal(size=30)[cl] + rng.normal(size=cl.size)
    alt = fit(lower(spec, random_intercept_data(spec, y, cl)))
    nspec = parse_spec({"items": ["y"], "families": [{"id": "f", "family": "gaussian"}], "dispersion_groups": [{"id": "d"}], "regressions": [{"name": "int"}]})
    rows = [[repr(float(v)), "f", "d", "y", 1] for v in y]
    null = fit(lower(nspec, make_dataset(nspec, ["response", "family_group", "dispersion_group", "item", "trials"], rows)))
    # closed-form null: ML normal
    s2 = np.mean((y - y.mean()) ** 2)
    assert null.loglik == pytest.approx(np.sum(norm.logpdf(y, y.mean(), np.sqrt(s2))), rel=1e-8)
    t = lrt(null, alt)
    assert t.df == 1 and t.statistic == pytest.approx(2 * (alt.loglik - null.loglik))
    assert t.p_value == pytest.approx(chi2.sf(t.statistic, 1))
    table = aic([null, alt], ["null", "alt"])
    assert table[0]["delta"] == 0.0
    assert {r["model"]: r["aic"] for r in table}["alt"] == pytest.approx(-2 * alt.loglik + 6)
    with pytest.raises(ValueError):
        lrt(-10.0, -12.0, df=1)
    with pytest.raises(ValueError):
        lrt(-10.0, -9.0, df=0)


def test_variance_components_and_parameter_table(rng):
    model = two_item_factor_model(rng, n_units=100)
    f = fit(model)
    vc = {(r["component"], r["group"]): r for r in variance_components(f)}
    th = f.parts()["theta"][0]
    phi1 = f.get("phi[da]")
    assert vc[("variance", "unit:eta")]["value"] == pytest.approx(phi1 * th * th)
    assert vc[("dispersion", "db")]["value"] == pytest.approx(f.get("phi[db]"))
    pt = parameter_table(f)
    assert [r["parameter"] for r in pt] == f.names
    assert all(r["lower"] <= r["estimate"] <= r["upper"] for r in pt if np.isfinite(r["se"]))


def test_latent_trajectory_offsets(rng):
    # a smooth in the predictor plus one latent; trajectories shift by lambda * offset * sd
    spec = parse_spec(
        {
            "items": ["a", "b"],
            "families": [{"id": "g", "family": "gaussian"}],
            "dispersion_groups": [{"id": "d"}],
            "levels": [{"level": 2, "name": "unit"}],
            "latent": [{"name": "eta", "level": 2}],
            "loadings": [{"latent": "eta", "items": ["a"], "value": 1.0}, {"latent": "eta", "items": ["b"], "symbol": "lb"}],
            "regressions": [{"name": "int", "per_item": True}],
            "smooths": [{"name": "f", "covariate": "x", "k": 6}],
        }
    )
    rows = []
    for u in range(60):
        e = rng.normal()
        for _ in range(2):
            x = rng.uniform()
            rows.append([np.sin(3 * x) + e + 0.3 * rng.normal(), "g", "d", "a", 1, f"u{u}", x])
            rows.append([np.sin(3 * x) + 1.4 * e + 0.3 * rng.normal(), "g", "d", "b", 1, f"u{u}", x])
    model = lower(spec, make_dataset(spec, ["response", "family_group", "dispersion_group", "item", "trials", "level2_id", "x"], rows))
    f = fit(model)
    grid = np.linspace(0.1, 0.9, 9)
    base = smooth_bands(f, "f", grid, n_sim=500)
    out = latent_trajectory_bands(f, "f", "eta", "b", [-1, 0, 2], grid, n_sim=500, sd=0.5)
    np.testing.assert_allclose(out[1].fhat, base.fhat, atol=1e-12)
    np.testing.assert_allclose(out[2].fhat - base.fhat, 2 * 0.5 * f.get("lb"), rtol=1e-10)
    assert np.all(out[2].se >= base.se - 1e-12)
    with pytest.raises(ValueError):
        latent_trajectory_bands(f, "f", "eta", "zzz", [0], grid)
