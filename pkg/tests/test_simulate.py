import numpy as np
import pytest

from galamm import fit
from galamm.assembly import lower
from galamm.simulate import (
    _trend_test,
    bootstrap,
    cognitive_like,
    coverage_study,
    power_study,
    replicate_rng,
    run_replicates,
    ses_like,
    simulate_from_fit,
    simulate_response,
    variance_boundary_study,
)
from galamm.simulate import base_fit as design_fit

from conftest import random_intercept_data, random_intercept_spec, two_item_factor_model


def test_replicate_streams():
    a = replicate_rng(5, 3).standard_normal(4)
    b = replicate_rng(5, 3).standard_normal(4)
    c = replicate_rng(5, 4).standard_normal(4)
    d = replicate_rng(6, 3).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


def test_simulated_moments_random_intercept():
    spec = random_intercept_spec()
    cl = np.repeat(np.arange(400), 2)
    model = lower(spec, random_intercept_data(spec, np.zeros(cl.size), cl))
    # beta 1, cluster variance phi*theta^2 = 0.5 * 4 = 2, residual 0.5
    x = model.layout.pack({"beta": [1.0], "theta": [2.0], "phi": [0.5]})
    y = simulate_response(model, x, np.zeros(model.r), replicate_rng(1, 0))
    assert y.mean() == pytest.approx(1.0, abs=0.2)
    assert y.var() == pytest.approx(2.5, rel=0.15)
    pairs = y.reshape(-1, 2)
    assert np.cov(pairs.T)[0, 1] == pytest.approx(2.0, rel=0.2)


def test_binomial_draws_within_trials():
    d = cognitive_like(n_subjects=20, seed=4)
    m = d.model()
    b = m.binom_rows
    assert np.all((m.y[b] >= 0) & (m.y[b] <= m.trials[b])) and np.all(m.y[b] == np.round(m.y[b]))
    with pytest.raises(ValueError):
        simulate_response(m, d.truth["params"], d.truth["u"], replicate_rng(0, 0), smooth_truth="other")


def test_run_replicates_independent_of_workers():
    task = _Square()
    assert run_replicates(task, 7, threads=1) == run_replicates(task, 7, threads=2)


class _Square:
    def __call__(self, i):
        return float(replicate_rng(9, i).standard_normal() ** 2)


def test_bootstrap_deterministic_across_threads(rng):
    model = two_item_factor_model(rng, n_units=60)
    f = fit(model)
    a = bootstrap(model, f, 4, seed=11, threads=1, hessian=False)
    b = bootstrap(model, f, 4, seed=11, threads=2, hessian=False)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    assert a.n_ok == 4 and a.failures == 0
    t = a.table()
    assert [r["parameter"] for r in t] == f.names
    assert t[0]["bias"] == pytest.approx(t[0]["mean"] - t[0]["truth"])


def test_simulate_from_fit_keeps_structure(rng):
    model = two_item_factor_model(rng, n_units=10)
    f = fit(model)
    d1 = simulate_from_fit(f, seed=3)
    d2 = simulate_from_fit(f, seed=3)
    np.testing.assert_array_equal(d1.response, d2.response)
    assert d1.n == model.n and list(d1.item) == list(model.data.item)


def test_trend_test_direction():
    dec = _trend_test([0, 0.1, 0.25, 0.5], [50, 20, 5, 0], [100] * 4)
    flat = _trend_test([0, 0.1, 0.25, 0.5], [10, 10, 10, 10], [100] * 4)
    assert dec["z"] < -5 and dec["p_decreasing"] < 1e-6
    assert flat["z"] == pytest.approx(0.0)


def test_design_truth_recovered_by_projection():
    d = cognitive_like(n_subjects=40, seed=2)
    m = d.model()
    t = next(t for t in m.smooths if t.name == "h_age")
    x, u = d.truth["params"], d.truth["u"]
    xs = m._cov("age")[t.rows]
    F, R = t.mixed.design_at(xs)
    curve = F @ x[t.beta_cols] + R @ (x[m.layout.index("theta[smooth:h_age]")] * u[t.u_cols])
    target = d.truth["smooth"]["h_age"](xs)
    # projection removes only the mean (sum-to-zero constraint) and spline error
    resid = curve - (target - target.mean())
    assert np.sqrt(np.mean(resid**2)) < 0.05


def test_study_smoke():
    cog = cognitive_like(n_subjects=40, seed=5)
    bf = design_fit(cog, hessian=False)
    rows, trend = variance_boundary_study(cog, bf, [0.0, 0.5], 3, seed=1)
    assert [r["ratio"] for r in rows] == [0.0, 0.5] and all(r["n"] + r["failures"] == 3 for r in rows)
    assert set(trend) == {"z", "p_decreasing"}

    ses = ses_like(n_subjects=60, seed=5)
    sf = design_fit(ses)
    prow, reps = power_study(ses, sf, [0.0, 0.1], 2, seed=1)
    assert [r["lambda8"] for r in prow] == [0.0, 0.1]
    assert 0.0 <= prow[0]["reject_rate"] <= 1.0
    crow = coverage_study(ses, sf, 2, offsets=(-1, 1), n_grid=10, n_sim=200, seed=1)
    assert [r["offset"] for r in crow] == [-1.0, 1.0]
    assert all(0.0 <= r["pointwise"] <= 1.0 for r in crow if r["n"])
