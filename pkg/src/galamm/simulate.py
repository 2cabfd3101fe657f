"""Parametric bootstrap and synthetic study designs.

Every study follows the same recipe: a base dataset is generated from
explicit truths, the model is fitted to it, and replicate datasets are
drawn from that fit (optionally with some parameters overridden). The
covariates and grouping structure stay fixed across replicates; only the
latent disturbances and the responses are redrawn. The penalised spline
coefficients are held at their point estimates.

Replicate ``i`` draws from its own Philox stream spawned from the study
seed, so results do not depend on the number of worker processes.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest, norm

from .assembly import lower
from .data import build_dataset
from .estimation import PIRLSError, fit
from .inference import aic, latent_trajectory_bands, lrt
from .modelspec import parse_spec
from .sparse import NotPositiveDefiniteError

__all__ = [
    "DESIGNS",
    "BootstrapResult",
    "StudyDesign",
    "bootstrap",
    "cognitive_like",
    "coverage_study",
    "power_study",
    "replicate_rng",
    "base_fit",
    "run_replicates",
    "ses_like",
    "simulate_from_fit",
    "simulate_response",
    "variance_boundary_study",
]

FIT_ERRORS = (PIRLSError, NotPositiveDefiniteError, FloatingPointError, np.linalg.LinAlgError, ValueError)


def default_threads():
    v = os.environ.get("GALAMM_THREADS", "")
    return max(1, int(v)) if v.strip() else 1


def replicate_rng(seed, index):
    """Philox generator for replicate ``index`` of a study seeded with ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


# -- response simulation -------------------------------------------------------------


def simulate_response(model, params, u_fixed, rng, smooth_truth="estimate"):
    """Responses drawn at ``params`` with fresh latent disturbances.

    ``u_fixed`` supplies the spline block of ``u`` (positions from
    ``model.r_latent`` on); the latent block is drawn from N(0, phi_1 I).
    With ``smooth_truth="prior"`` the spline block is redrawn from its
    prior as well, the empirical-Bayes reading of a smooth as a random
    effect.
    """
    from .estimation import Objective

    if smooth_truth not in ("estimate", "prior"):
        raise ValueError(f"smooth_truth must be 'estimate' or 'prior', got {smooth_truth!r}")
    zl, eta, phi = Objective(model)._plain_pieces(params)
    u = np.array(u_fixed, dtype=float, copy=True)
    u[: model.r_latent] = rng.standard_normal(model.r_latent) * np.sqrt(phi[0])
    if smooth_truth == "prior":
        k = model.r - model.r_latent
        u[model.r_latent :] = rng.standard_normal(k) * np.sqrt(phi[0])
    nu = eta + model.row_sum @ (zl * u[model.zl_col])
    y = np.empty(model.n)
    g = model.gauss_rows
    e = rng.standard_normal(model.n)
    y[g] = nu[g] + e[g] * np.sqrt(phi[model.disp_index[g]])
    b = model.binom_rows
    if b.size:
        p = 0.5 * (1.0 + np.tanh(0.5 * nu[b]))
        y[b] = rng.binomial(model.trials[b].astype(np.int64), p)
    return y


def simulate_from_fit(fit_result, model=None, seed=0, params=None, index=0, smooth_truth="estimate"):
    """New dataset from a fitted model; smooths held at their estimates by default."""
    model = model or fit_result.model
    params = fit_result.params if params is None else params
    y = simulate_response(model, params, fit_result.u_hat, replicate_rng(seed, index), smooth_truth)
    return model.data.with_response(y)


# -- study designs ------------------------------------------------------------------


@dataclass
class StudyDesign:
    name: str
    spec: object
    data: object
    truth: dict
    sizes: dict
    variants: dict = field(default_factory=dict)  # alternative specs on the same data

    def model(self, variant=None):
        spec = self.spec if variant is None else self.variants[variant]
        return lower(spec, self.data)


def _truth_params(model, values, smooth_truth):
    """Packed parameters and the spline block of ``u`` representing given truths.

    ``smooth_truth`` maps a smooth name to a function of its covariate;
    the function is projected on the mixed basis over the unit values.
    """
    lay = model.layout
    x = np.zeros(lay.size)
    for name, v in values.items():
        x[lay.index(name)] = v
    u = np.zeros(model.r)
    for term in model.smooths:
        f = smooth_truth[term.name]
        xs = model._cov(term.covariate)[term.rows]
        F, R = term.mixed.design_at(xs)
        C = np.hstack([F, R])
        coef = np.linalg.lstsq(C, f(xs), rcond=None)[0]
        nf = F.shape[1]
        x[term.beta_cols] = coef[:nf]
        theta = x[lay.blocks["theta"].start + term.theta_index]
        if theta <= 0:
            raise ValueError(f"smooth {term.name!r}: truth needs a positive theta")
        u[term.u_cols] = coef[nf:] / theta
    return x, u


def _cognitive_truth(a):
    # lifespan-like trajectory: rise through childhood, plateau, late decline
    return 1.6 * np.tanh((a - 12.0) / 7.0) - 0.0004 * (a - 30.0) ** 2 * (a > 30.0) - 0.8


def cognitive_like(n_subjects=150, n_timepoints=2, trials=16, psi2=0.3, psi3=0.7, k=8, seed=1):
    """One domain measured by two binomial and two gaussian items.

    A timepoint-level latent ``eta2`` depends on the subject-level ``eta3``
    (coefficient fixed at 1), on a retest indicator and on a smooth of age.
    """
    rng = replicate_rng(seed, 10**6)
    doc = {
        "items": ["b1", "b2", "g1", "g2"],
        "families": [{"id": "bin", "family": "binomial"}, {"id": "gau", "family": "gaussian"}],
        "dispersion_groups": [{"id": "dbin", "fixed": 1.0}, {"id": "dgau"}],
        "levels": [{"level": 2, "name": "timepoint", "parent": 3}, {"level": 3, "name": "subject"}],
        "latent": [{"name": "eta2", "level": 2}, {"name": "eta3", "level": 3}],
        "covariance": [{"level": 2, "structure": "diagonal"}, {"level": 3, "structure": "unstructured"}],
        "structural": [{"target": "eta2", "source": "eta3", "value": 1.0}],
        "loadings": [
            {"latent": "eta2", "items": ["b1"], "value": 1.0},
            {"latent": "eta2", "items": ["b2"], "symbol": "lambda_b2"},
            {"latent": "eta2", "items": ["g1"], "symbol": "lambda_g1"},
            {"latent": "eta2", "items": ["g2"], "symbol": "lambda_g2"},
        ],
        "regressions": [
            {"name": "intercept", "per_item": True},
            {"name": "retest", "covariate": "retest", "target": "eta2"},
        ],
        "smooths": [{"name": "h_age", "covariate": "age", "k": k, "target": "eta2"}],
        "covariates": {"age": 2, "retest": 2},
    }
    spec = parse_spec(doc)
    header = ["response", "family_group", "dispersion_group", "item", "trials", "level2_id", "level3_id", "age", "retest"]
    recs = []
    line = 2
    base_age = rng.uniform(6.0, 85.0, n_subjects)
    for s in range(n_subjects):
        age = base_age[s]
        for t in range(n_timepoints):
            if t:
                age = age + rng.uniform(1.5, 4.0)
            for it in ("b1", "b2", "g1", "g2"):
                binom = it.startswith("b")
                recs.append(
                    (
                        line,
                        [
                            "0",
                            "bin" if binom else "gau",
                            "dbin" if binom else "dgau",
                            it,
                            str(trials) if binom else "1",
                            f"s{s}t{t}",
                            f"s{s}",
                            repr(float(age)),
                            str(int(t > 0)),
                        ],
                    )
                )
                line += 1
    data = build_dataset(header, recs, spec)
    model = lower(spec, data)
    values = {
        "intercept[b1]": 0.3,
        "intercept[b2]": -0.2,
        "intercept[g1]": 0.0,
        "intercept[g2]": 0.4,
        "retest": 0.25,
        "theta[timepoint:eta2,eta2]": np.sqrt(psi2),
        "theta[subject:eta3,eta3]": np.sqrt(psi3),
        "theta[smooth:h_age]": 1.0,
        "lambda_b2": 1.2,
        "lambda_g1": 0.8,
        "lambda_g2": 0.6,
        "phi[dgau]": 0.25,
    }
    x, u = _truth_params(model, values, {"h_age": _cognitive_truth})
    y = simulate_response(model, x, u, rng)
    data = data.with_response(y)
    return StudyDesign(
        name="cognitive-like",
        spec=spec,
        data=data,
        truth={"params": x, "u": u, "values": values, "smooth": {"h_age": _cognitive_truth}},
        sizes={"subjects": n_subjects, "timepoints": n_timepoints, "items": 4, "trials": trials},
    )


def _ses_truth(a):
    # standardized age in; hippocampus-like rise, plateau and decline
    return 0.9 * np.tanh(2.0 * (a + 1.3)) - 0.35 * np.clip(a - 0.3, 0.0, None) ** 2 - 0.2


def ses_like(n_subjects=200, lambda8=0.0, k=8, seed=2, income_rate=0.35):
    """Latent socioeconomic status measured by education and income items,
    acting on a repeated hippocampus-like measurement with loading
    ``lambda7 + lambda8 * age``.

    Variants: ``"null"`` drops the interaction loading ``lambda8``.
    """
    rng = replicate_rng(seed, 10**6)
    items = ["edu1", "edu2", "edu3", "inc1", "inc2", "inc3", "hippo"]

    def doc(interaction):
        loads = [
            {"latent": "ses", "items": ["edu1", "edu2", "edu3"], "value": 1.0, "symbol": "lambda_edu"},
            {"latent": "ses", "items": ["inc1", "inc2", "inc3"], "symbol": "lambda_inc"},
            {"latent": "ses", "items": ["hippo"], "symbol": "lambda7"},
            {"latent": "brain", "items": ["hippo"], "value": 1.0},
        ]
        if interaction:
            loads.append({"latent": "ses", "items": ["hippo"], "symbol": "lambda8", "covariate": "age"})
        return {
            "items": items,
            "families": [{"id": "gau", "family": "gaussian"}],
            "dispersion_groups": [{"id": "hippo"}, {"id": "edu"}, {"id": "inc"}],
            "levels": [{"level": 2, "name": "subject"}],
            "latent": [{"name": "ses", "level": 2}, {"name": "brain", "level": 2}],
            "covariance": [{"level": 2, "structure": "diagonal"}],
            "loadings": loads,
            "regressions": [{"name": "intercept", "per_item": True}],
            "smooths": [{"name": "f_age", "covariate": "age", "k": k, "items": ["hippo"]}],
        }

    spec = parse_spec(doc(True))
    spec_null = parse_spec(doc(False))
    header = ["response", "family_group", "dispersion_group", "item", "level2_id", "age"]
    raw = []
    base = rng.uniform(5.0, 90.0, n_subjects)
    for s in range(n_subjects):
        n_scan = 1 + rng.binomial(3, 0.5)
        age = base[s]
        for t in range(n_scan):
            if t:
                age = age + rng.uniform(1.5, 3.5)
            raw.append(("hippo", "hippo", s, age))
        for it in rng.choice(["edu1", "edu2", "edu3"], size=1 + rng.binomial(1, 0.5), replace=False):
            raw.append((str(it), "edu", s, base[s]))
        if rng.uniform() < income_rate:
            raw.append((str(rng.choice(["inc1", "inc2", "inc3"])), "inc", s, base[s]))
    ages = np.array([r[3] for r in raw])
    mean, sd = float(ages.mean()), float(ages.std())
    recs = []
    for line, (it, grp, s, age) in enumerate(raw, start=2):
        recs.append((line, ["0", "gau", grp, it, f"s{s}", repr(float((age - mean) / sd))]))
    data = build_dataset(header, recs, spec)
    model = lower(spec, data)
    values = {
        "intercept[edu1]": 0.1,
        "intercept[edu2]": 0.0,
        "intercept[edu3]": -0.1,
        "intercept[inc1]": 0.2,
        "intercept[inc2]": 0.0,
        "intercept[inc3]": -0.2,
        "intercept[hippo]": 0.0,
        "theta[subject:ses,ses]": np.sqrt(0.5 / 0.04),
        "theta[subject:brain,brain]": np.sqrt(0.6 / 0.04),
        "theta[smooth:f_age]": 1.0,
        "lambda_inc": 0.8,
        "lambda7": 0.15,
        "lambda8": lambda8,
        "phi[hippo]": 0.04,
        "phi[edu]": 0.5,
        "phi[inc]": 0.7,
    }
    x, u = _truth_params(model, values, {"f_age": _ses_truth})
    y = simulate_response(model, x, u, rng)
    data = data.with_response(y)
    return StudyDesign(
        name="ses-like",
        spec=spec,
        data=data,
        truth={"params": x, "u": u, "values": values, "smooth": {"f_age": _ses_truth}, "age_scale": (mean, sd)},
        sizes={"subjects": n_subjects, "rows": data.n},
        variants={"null": spec_null},
    )


DESIGNS = {"cognitive-like": cognitive_like, "ses-like": ses_like}


# -- replicate driver ------------------------------------------------------------

_WORKER = {}


def _init_worker(task):
    _WORKER["task"] = task


def _run_one(index):
    return _WORKER["task"](index)


def run_replicates(task, n_rep, threads=None):
    """``[task(i) for i in range(n_rep)]``, optionally across processes."""
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or n_rep <= 1:
        return [task(i) for i in range(n_rep)]
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(task,)) as ex:
        return list(ex.map(_run_one, range(n_rep), chunksize=max(1, n_rep // (4 * threads))))


def _safe_fit(model, init, **kw):
    try:
        return fit(model, init=init, **kw)
    except FIT_ERRORS:
        return None


# -- parametric bootstrap ----------------------------------------------------------


@dataclass
class BootstrapResult:
    names: list
    truth: np.ndarray
    estimates: np.ndarray  # converged replicates only
    se: np.ndarray
    edf: dict
    edf_truth: dict
    boundary_hits: np.ndarray
    converged: np.ndarray  # flag per requested replicate
    failures: int
    seed: int
    rmse: dict = field(default_factory=dict)

    @property
    def n_ok(self):
        return int(self.estimates.shape[0])

    @property
    def mean(self):
        return self.estimates.mean(axis=0)

    @property
    def bias(self):
        return self.mean - self.truth

    @property
    def boot_se(self):
        return self.estimates.std(axis=0, ddof=1)

    @property
    def mcse(self):
        return self.boot_se / np.sqrt(self.n_ok)

    @property
    def mean_asymptotic_se(self):
        ok = np.isfinite(self.se)
        n = ok.sum(axis=0)
        total = np.where(ok, self.se, 0.0).sum(axis=0)
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)

    def table(self):
        rows = []
        for j, nm in enumerate(self.names):
            rows.append(
                {
                    "parameter": nm,
                    "truth": float(self.truth[j]),
                    "mean": float(self.mean[j]),
                    "bias": float(self.bias[j]),
                    "mcse": float(self.mcse[j]),
                    "bootstrap_se": float(self.boot_se[j]),
                    "mean_asymptotic_se": float(self.mean_asymptotic_se[j]),
                    "boundary_hits": int(self.boundary_hits[j]),
                }
            )
        return rows


class _BootstrapTask:
    def __init__(self, model, params, u_hat, seed, hessian, grid, smooth_truth="estimate"):
        self.smooth_truth = smooth_truth
        self.model = model
        self.params = params
        self.u_hat = u_hat
        self.seed = seed
        self.hessian = hessian
        self.grid = grid

    def __call__(self, i):
        from .inference import smooth_design

        y = simulate_response(self.model, self.params, self.u_hat, replicate_rng(self.seed, i), self.smooth_truth)
        m = self.model.with_response(y)
        f = _safe_fit(m, self.params, hessian=self.hessian)
        if f is None or not f.converged:
            return None
        curves = {}
        for t in m.smooths:
            C = smooth_design(f, t.name, self.grid[t.name])
            coef = np.concatenate([f.params[t.beta_cols], f.parts()["theta"][t.theta_index] * f.u_hat[t.u_cols]])
            curves[t.name] = C @ coef
        return {"params": f.params, "se": f.se, "edf": f.edf, "boundary": f.boundary, "curves": curves}


def _grid_for(model, term, n=50):
    x = model._cov(term.covariate)[term.rows]
    return np.linspace(x.min(), x.max(), n)


def bootstrap(model, fit_result, n_rep, seed=0, threads=None, hessian=True, params=None, smooth_truth="estimate"):
    """Simulate-and-refit cycles from ``fit_result``; refits start at the generating values."""
    from .inference import smooth_design

    params = fit_result.params if params is None else np.asarray(params, dtype=float)
    grid = {t.name: _grid_for(model, t) for t in model.smooths}
    task = _BootstrapTask(model, params, fit_result.u_hat, seed, hessian, grid, smooth_truth)
    out = run_replicates(task, n_rep, threads)
    ok = [o for o in out if o is not None]
    p = model.layout.size
    est = np.array([o["params"] for o in ok]).reshape(-1, p)
    se = np.array([o["se"] for o in ok]).reshape(-1, p)
    bnd = np.array([o["boundary"] for o in ok]).reshape(-1, p).sum(axis=0)
    edf = {t.name: np.array([o["edf"].get(t.name, np.nan) for o in ok]) for t in model.smooths}
    rmse = {}
    for t in model.smooths:
        C = smooth_design(fit_result, t.name, grid[t.name])
        coef = np.concatenate([params[t.beta_cols], params[model.layout.blocks["theta"].start + t.theta_index] * fit_result.u_hat[t.u_cols]])
        truth_curve = C @ coef
        if ok and smooth_truth == "estimate":
            err = np.array([o["curves"][t.name] - truth_curve for o in ok])
            rmse[t.name] = float(np.sqrt(np.mean(err**2)))
    return BootstrapResult(
        names=list(model.layout.names),
        truth=params.copy(),
        estimates=est,
        se=se,
        edf=edf,
        edf_truth=dict(fit_result.edf),
        boundary_hits=bnd,
        converged=np.array([o is not None for o in out]),
        failures=sum(o is None for o in out),
        seed=seed,
        rmse=rmse,
    )


# -- variance boundary study ----------------------------------------------------


class _BoundaryTask:
    def __init__(self, model, params, u_hat, seed, target):
        self.model, self.params, self.u_hat, self.seed, self.target = model, params, u_hat, seed, target

    def __call__(self, i):
        y = simulate_response(self.model, self.params, self.u_hat, replicate_rng(self.seed, i))
        m = self.model.with_response(y)
        f = _safe_fit(m, self.params, hessian=False)
        if f is None:
            return None
        return {"zero": bool(f.params[self.target] == 0.0), "converged": f.converged, "value": float(f.params[self.target])}


def _proportion_row(k, n):
    if n == 0:
        return float("nan"), float("nan"), float("nan")
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95)
    return k / n, float(ci.low), float(ci.high)


def variance_boundary_study(design, base_fit, ratios, n_rep, seed=0, threads=None, latent2="eta2", latent3="eta3"):
    """Share of replicates whose level-2 variance estimate is exactly zero, per ratio.

    The ratio is level-2 variance over total (level-2 plus level-3) variance;
    the total is held at the base fit's value.
    """
    model = base_fit.model
    lay = model.layout
    phi1 = model.phi_vector(base_fit.parts()["phi"])[0]
    i2 = lay.index(next(n for n in lay.names if n.startswith("theta[") and n.endswith(f":{latent2},{latent2}]")))
    i3 = lay.index(next(n for n in lay.names if n.startswith("theta[") and n.endswith(f":{latent3},{latent3}]")))
    total = phi1 * (base_fit.params[i2] ** 2 + base_fit.params[i3] ** 2)
    rows = []
    for ratio in ratios:
        x = base_fit.params.copy()
        x[i2] = np.sqrt(ratio * total / phi1)
        x[i3] = np.sqrt((1.0 - ratio) * total / phi1)
        out = run_replicates(_BoundaryTask(model, x, base_fit.u_hat, seed, i2), n_rep, threads)
        ok = [o for o in out if o is not None]
        k = sum(o["zero"] for o in ok)
        prop, lo, hi = _proportion_row(k, len(ok))
        rows.append(
            {"ratio": float(ratio), "n": len(ok), "failures": n_rep - len(ok), "zero": k, "proportion": prop, "ci_low": lo, "ci_high": hi}
        )
    trend = _trend_test([r["ratio"] for r in rows], [r["zero"] for r in rows], [r["n"] for r in rows])
    return rows, trend


def _trend_test(x, k, n):
    """Cochran-Armitage test for a linear trend in proportions (z, one-sided p for decrease)."""
    x, k, n = (np.asarray(v, dtype=float) for v in (x, k, n))
    N = n.sum()
    if N == 0:
        return {"z": float("nan"), "p_decreasing": float("nan")}
    pbar = k.sum() / N
    t = np.sum(x * (k - n * pbar))
    var = pbar * (1 - pbar) * (np.sum(n * x * x) - np.sum(n * x) ** 2 / N)
    z = t / np.sqrt(var) if var > 0 else (0.0 if t == 0 else -np.inf * np.sign(-t))
    return {"z": float(z), "p_decreasing": float(norm.cdf(z))}


# -- power and calibration ----------------------------------------------------------


class _PowerTask:
    def __init__(self, alt, null, params, u_hat, seed, i8, alpha):
        self.alt, self.null = alt, null
        self.params, self.u_hat, self.seed, self.i8, self.alpha = params, u_hat, seed, i8, alpha
        keep = [j for j in range(alt.layout.size) if j != i8]
        names = [alt.layout.names[j] for j in keep]
        if list(names) != list(null.layout.names):
            raise ValueError("null model layout must equal the alternative without lambda8")
        self.keep = np.asarray(keep)

    def __call__(self, i):
        y = simulate_response(self.alt, self.params, self.u_hat, replicate_rng(self.seed, i))
        ma = self.alt.with_response(y)
        mn = self.null.with_response(y)
        fn = _safe_fit(mn, self.params[self.keep], hessian=False)
        if fn is None:
            return None
        start = self.params.copy()
        start[self.keep] = fn.params
        start[self.i8] = 0.0
        fa = _safe_fit(ma, start, hessian=False)
        if fa is None:
            return None
        if fa.loglik < fn.loglik:
            # the alternative nests the null; restart it from the truth as well
            fb = _safe_fit(ma, self.params, hessian=False)
            if fb is not None and fb.loglik > fa.loglik:
                fa = fb
        try:
            test = lrt(fn, fa, df=1)
        except ValueError:
            return None
        table = aic([fn, fa], names=["null", "alt"])
        return {
            "replicate": i,
            "statistic": test.statistic,
            "p": test.p_value,
            "reject": test.p_value < self.alpha,
            "aic_alt": table[0]["model"] == "alt",
            "lambda8": float(fa.params[self.i8]),
            "converged": fa.converged and fn.converged,
        }


def power_study(design, base_fit, grid, n_rep, seed=0, threads=None, alpha=0.05, n_rep_null=None):
    """LRT rejection and AIC selection rates for the interaction loading per grid value.

    All grid values share replicate streams (common random numbers), so
    differences between cells reflect the signal, not the noise draws.
    ``n_rep_null`` sets a separate replicate count at lambda8 = 0.
    """
    alt = base_fit.model
    null = lower(design.variants["null"], design.data)
    i8 = alt.layout.index("lambda8")
    rows, reps = [], {}
    for lam in grid:
        n = n_rep_null if (lam == 0 and n_rep_null) else n_rep
        x = base_fit.params.copy()
        x[i8] = lam
        out = run_replicates(_PowerTask(alt, null, x, base_fit.u_hat, seed, i8, alpha), n, threads)
        ok = [o for o in out if o is not None]
        rej = sum(o["reject"] for o in ok)
        sel = sum(o["aic_alt"] for o in ok)
        r_p, r_lo, r_hi = _proportion_row(rej, len(ok))
        a_p, a_lo, a_hi = _proportion_row(sel, len(ok))
        est = np.array([o["lambda8"] for o in ok])
        med = float(np.median(est)) if est.size else float("nan")
        # MCSE of the median from the normal approximation
        mcse = float(np.sqrt(np.pi / 2.0) * est.std(ddof=1) / np.sqrt(est.size)) if est.size > 1 else float("nan")
        rows.append(
            {
                "lambda8": float(lam),
                "n": len(ok),
                "failures": n - len(ok),
                "reject_rate": r_p,
                "reject_ci_low": r_lo,
                "reject_ci_high": r_hi,
                "aic_rate": a_p,
                "aic_ci_low": a_lo,
                "aic_ci_high": a_hi,
                "lambda8_median": med,
                "lambda8_mean": float(est.mean()) if est.size else float("nan"),
                "lambda8_median_mcse": mcse,
            }
        )
        reps[float(lam)] = ok
    return rows, reps


# -- band coverage ----------------------------------------------------------------


class _CoverageTask:
    def __init__(self, model, params, u_hat, seed, smooth, latent, item, offsets, sd, grid, truth, n_sim, alpha):
        self.__dict__.update(locals())
        del self.__dict__["self"]

    def __call__(self, i):
        y = simulate_response(self.model, self.params, self.u_hat, replicate_rng(self.seed, i))
        m = self.model.with_response(y)
        f = _safe_fit(m, self.params, hessian=True)
        if f is None or not f.converged:
            return None
        try:
            bands = latent_trajectory_bands(
                f, self.smooth, self.latent, self.item, self.offsets, self.grid,
                alpha=self.alpha, n_sim=self.n_sim, seed=self.seed + i, sd=self.sd,
            )
        except (np.linalg.LinAlgError, ValueError):
            return None
        pt, sim = [], []
        for b, tr in zip(bands, self.truth):
            inside = (tr >= b.lo_pt) & (tr <= b.hi_pt)
            pt.append(float(inside.mean()))
            sim.append(bool(np.all((tr >= b.lo_sim) & (tr <= b.hi_sim))))
        return {"pointwise": pt, "simultaneous": sim}


def coverage_study(design, base_fit, n_rep, offsets=(-2, -1, 0, 1, 2), seed=0, threads=None, n_grid=40, n_sim=10000, alpha=0.05, smooth="f_age", latent="ses", item="hippo"):
    """Across-the-function pointwise and simultaneous coverage of trajectory bands.

    Curves are evaluated at latent values ``offset * sd`` with ``sd`` the
    generating standard deviation, so every replicate targets the same curve.
    """
    model = base_fit.model
    term = next(t for t in model.smooths if t.name == smooth)
    grid = _grid_for(model, term, n_grid)
    k = model.latent_names.index(latent)
    lv = int(model.latent_level[k])
    psi = model.psi_blocks(base_fit.params)[lv]
    sd = float(np.sqrt(psi[model.level_latents[lv].index(k), model.level_latents[lv].index(k)]))
    truth_bands = latent_trajectory_bands(base_fit, smooth, latent, item, offsets, grid, n_sim=2, sd=sd)
    truth = [b.fhat for b in truth_bands]
    task = _CoverageTask(model, base_fit.params, base_fit.u_hat, seed, smooth, latent, item, list(offsets), sd, grid, truth, n_sim, alpha)
    out = run_replicates(task, n_rep, threads)
    ok = [o for o in out if o is not None]
    rows = []
    for j, off in enumerate(offsets):
        pt = np.array([o["pointwise"][j] for o in ok])
        sim = np.array([o["simultaneous"][j] for o in ok])
        s_p, s_lo, s_hi = _proportion_row(int(sim.sum()), sim.size)
        rows.append(
            {
                "offset": float(off),
                "n": len(ok),
                "failures": n_rep - len(ok),
                "pointwise": float(pt.mean()) if pt.size else float("nan"),
                "pointwise_mcse": float(pt.std(ddof=1) / np.sqrt(pt.size)) if pt.size > 1 else float("nan"),
                "simultaneous": s_p,
                "simultaneous_ci_low": s_lo,
                "simultaneous_ci_high": s_hi,
            }
        )
    return rows


def base_fit(design, variant=None, **kw):
    """Fit the design's model to its base dataset, starting from the truth."""
    model = design.model(variant)
    init = design.truth["params"] if variant is None else None
    return fit(model, init=init, **kw)

