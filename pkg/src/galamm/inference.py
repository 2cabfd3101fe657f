"""Post-fit inference: smooth bands, effective degrees of freedom, AIC and LRT.

Smooth-term uncertainty uses the empirical Bayes posterior of the fixed
and random effects at the estimated variance parameters. Its precision is

    J = [[X'VX, X'V Z_L], [Z_L'V X, Z_L'V Z_L + I / phi_1]],

and the blocks of ``J^{-1}`` needed here come from the sparse factorisation
of the lower-right block and a Schur complement in the fixed effects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.stats import chi2, norm

__all__ = [
    "LRTResult",
    "SmoothEstimate",
    "aic",
    "edf",
    "edf_penalized",
    "latent_trajectory_bands",
    "lrt",
    "parameter_table",
    "posterior_argmax",
    "smooth_bands",
    "smooth_covariance",
    "variance_components",
]

CHUNK = 10000


@dataclass
class SmoothEstimate:
    name: str
    grid: np.ndarray
    fhat: np.ndarray
    se: np.ndarray
    lo_pt: np.ndarray
    hi_pt: np.ndarray
    lo_sim: np.ndarray
    hi_sim: np.ndarray
    z: float
    critical: float
    edf: float
    alpha: float
    n_sim: int
    seed: int
    offset: float = 0.0

    @property
    def pointwise_band(self):
        return self.lo_pt, self.hi_pt

    @property
    def simultaneous_band(self):
        return self.lo_sim, self.hi_sim


# -- joint posterior of (beta, u) ---------------------------------------------------


def _posterior(fit):
    cached = getattr(fit, "_posterior_cache", None)
    if cached is not None:
        return cached
    from .estimation import Objective

    model = fit.model
    obj = Objective(model)
    state = obj.pirls(fit.params, fit.u_hat)
    zl, _, phi = obj._plain_pieces(fit.params)
    X = model.update_designs(fit.params)[0]
    ZL = sp.csr_matrix((zl, (model.zl_row, model.zl_col)), shape=(model.n, model.r))
    V = state.V
    XtVX = X.T @ (X * V[:, None])
    if model.r:
        ZtVX = np.asarray(ZL.T @ (X * V[:, None]))
        Wm = state.factor.solve(ZtVX) if model.p_beta else np.zeros((model.r, 0))
        S = XtVX - ZtVX.T @ Wm
    else:
        Wm = np.zeros((0, model.p_beta))
        S = XtVX
    cov_bb = np.linalg.pinv(0.5 * (S + S.T)) if model.p_beta else np.zeros((0, 0))
    out = {"state": state, "W": Wm, "cov_bb": cov_bb, "phi1": float(phi[0])}
    fit._posterior_cache = out
    return out


def _term(model, name):
    for t in model.smooths:
        if t.name == name:
            return t
    raise KeyError(f"unknown smooth {name!r}; known: {[t.name for t in model.smooths]}")


def _cov_u_block(post, cols):
    """Rows/cols ``cols`` of the u-block of ``J^{-1}`` and its cross block with beta."""
    fac = post["state"].factor
    r = post["W"].shape[0]
    E = np.zeros((r, cols.size))
    E[cols, np.arange(cols.size)] = 1.0
    Hinv = fac.solve(E)[cols] if cols.size else np.zeros((0, 0))
    Ws = post["W"][cols]
    cov_uu = Hinv + Ws @ post["cov_bb"] @ Ws.T
    cov_ub = -Ws @ post["cov_bb"]
    return cov_uu, cov_ub


def smooth_covariance(fit, name):
    """Estimates and covariance of the mixed-form coefficients ``(beta_F, b_R)``.

    ``b_R = theta_s u_s`` are the penalised coefficients on the scale of the
    mixed-model design ``design_at``.
    """
    model = fit.model
    term = _term(model, name)
    post = _posterior(fit)
    theta = fit.parts()["theta"][term.theta_index]
    cov_uu, cov_ub = _cov_u_block(post, term.u_cols)
    bc = term.beta_cols
    cov_bb = post["cov_bb"][np.ix_(bc, bc)]
    cross = cov_ub[:, bc] * theta
    C = np.block([[cov_bb, cross.T], [cross, cov_uu * theta * theta]])
    coef = np.concatenate([fit.params[model.layout.blocks["beta"]][bc], theta * fit.u_hat[term.u_cols]])
    return coef, 0.5 * (C + C.T)


def edf(name, fit):
    """Effective degrees of freedom of a smooth: its block of ``tr(J^{-1}(J - prior))``.

    For a single smooth with no other random effects this equals
    ``tr((X'WX + S / psi)^{-1} X'WX)``.
    """
    model = fit.model
    term = _term(model, name)
    post = _posterior(fit)
    cov_uu, _ = _cov_u_block(post, term.u_cols)
    return float(term.beta_cols.size + term.u_cols.size - np.trace(cov_uu) / post["phi1"])


def edf_penalized(X, S, lam):
    """``tr((X'X + lam S)^{-1} X'X)`` by direct dense algebra."""
    XtX = X.T @ X
    return float(np.trace(np.linalg.solve(XtX + lam * S, XtX)))


# -- bands ------------------------------------------------------------------------------


def _sqrt_psd(C):
    w, Q = np.linalg.eigh(0.5 * (C + C.T))
    return Q * np.sqrt(np.clip(w, 0.0, None))


def _critical(Cg, cov, se, alpha, n_sim, seed):
    """(1 - alpha) quantile of max |Cg delta| / se over posterior draws."""
    if Cg.shape[0] == 1:
        return float(norm.ppf(1.0 - alpha / 2.0))
    root = _sqrt_psd(cov)
    M = Cg @ root
    safe = np.where(se > 0, se, np.inf)
    rng = np.random.Generator(np.random.Philox(seed))
    out = np.empty(n_sim)
    for s in range(0, n_sim, CHUNK):
        k = min(CHUNK, n_sim - s)
        draws = rng.standard_normal((root.shape[1], k))
        out[s : s + k] = np.max(np.abs(M @ draws) / safe[:, None], axis=0)
    return float(np.quantile(out, 1.0 - alpha))


def _band(name, grid, Cg, coef, cov, alpha, n_sim, seed, edf_value, offset=0.0):
    fhat = Cg @ coef
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Cg, cov, Cg), 0.0, None))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    crit = max(z, _critical(Cg, cov, se, alpha, n_sim, seed))
    return SmoothEstimate(
        name=name,
        grid=np.asarray(grid, dtype=float),
        fhat=fhat,
        se=se,
        lo_pt=fhat - z * se,
        hi_pt=fhat + z * se,
        lo_sim=fhat - crit * se,
        hi_sim=fhat + crit * se,
        z=z,
        critical=crit,
        edf=edf_value,
        alpha=alpha,
        n_sim=n_sim,
        seed=seed,
        offset=offset,
    )


def smooth_design(fit, name, grid):
    term = _term(fit.model, name)
    F, R = term.mixed.design_at(np.asarray(grid, dtype=float))
    return np.hstack([F, R])


def smooth_bands(fit, name, grid, alpha=0.05, n_sim=100000, seed=0):
    """Pointwise and simultaneous bands for smooth ``name`` on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    coef, cov = smooth_covariance(fit, name)
    Cg = smooth_design(fit, name, grid)
    return _band(name, grid, Cg, coef, cov, alpha, n_sim, seed, edf(name, fit))


def _loading_terms(fit, latent, item, covariate):
    """Packed indices and covariate flags of loadings of ``item`` on ``latent``."""
    spec = fit.model.spec
    terms = []
    for ld in spec.loadings:
        if ld.latent != latent or item not in ld.items:
            continue
        if ld.covariate is not None and ld.covariate != covariate:
            raise ValueError(f"loading {ld.symbol!r} depends on {ld.covariate!r}, not on the smooth covariate")
        idx = None if ld.fixed else fit.model.layout.index(ld.symbol)
        terms.append((idx, ld.value, ld.covariate is not None))
    if not terms:
        raise ValueError(f"latent {latent!r} has no loading on item {item!r}")
    return terms


def latent_trajectory_bands(fit, smooth, latent, item, offsets, grid, alpha=0.05, n_sim=10000, seed=0, sd=None):
    """Curves ``f(a) + lambda(a) eta`` at ``eta = offset * sd(latent)``.

    ``lambda(a)`` sums the loadings of ``item`` on ``latent``; loadings
    declared with the smooth's covariate contribute ``lambda * a``. The
    band combines the smooth posterior and the Wald covariance of the free
    loadings, treating the two as independent. ``sd`` overrides the
    estimated latent standard deviation.
    """
    model = fit.model
    term = _term(model, smooth)
    k = model.latent_names.index(latent)
    lv = int(model.latent_level[k])
    psi = model.psi_blocks(fit.params)[lv]
    m = model.level_latents[lv].index(k)
    if sd is None:
        sd = float(np.sqrt(max(psi[m, m], 0.0)))
    grid = np.asarray(grid, dtype=float)
    coef, cov = smooth_covariance(fit, smooth)
    Cs = smooth_design(fit, smooth, grid)
    terms = _loading_terms(fit, latent, item, term.covariate)
    free = sorted({t[0] for t in terms if t[0] is not None})
    vl = fit.vcov[np.ix_(free, free)] if free else np.zeros((0, 0))
    vl = np.where(np.isfinite(vl), vl, 0.0)
    lam_hat = fit.params[free] if free else np.zeros(0)
    e_smooth = edf(smooth, fit)
    out = []
    for s_i, off in enumerate(offsets):
        e = off * sd
        G = np.zeros((grid.size, len(free)))
        const = np.zeros(grid.size)
        for idx, val, by_cov in terms:
            mult = grid if by_cov else np.ones_like(grid)
            if idx is None:
                const += val * mult * e
            else:
                G[:, free.index(idx)] += mult * e
        Cg = np.hstack([Cs, G])
        cf = np.concatenate([coef, lam_hat])
        cv = np.block([[cov, np.zeros((cov.shape[0], len(free)))], [np.zeros((len(free), cov.shape[0])), vl]])
        est = _band(f"{smooth}@{off:+g}", grid, Cg, cf, cv, alpha, n_sim, seed + s_i, e_smooth, offset=off)
        for arr in ("fhat", "lo_pt", "hi_pt", "lo_sim", "hi_sim"):
            setattr(est, arr, getattr(est, arr) + const)
        out.append(est)
    return out


def posterior_argmax(fit, name, grid, n_sim=10000, seed=0):
    """Posterior draws of the location of the maximum of smooth ``name``."""
    grid = np.asarray(grid, dtype=float)
    coef, cov = smooth_covariance(fit, name)
    Cg = smooth_design(fit, name, grid)
    root = _sqrt_psd(cov)
    rng = np.random.Generator(np.random.Philox(seed))
    locs = np.empty(n_sim)
    for s in range(0, n_sim, CHUNK):
        k = min(CHUNK, n_sim - s)
        curves = Cg @ (coef[:, None] + root @ rng.standard_normal((root.shape[1], k)))
        locs[s : s + k] = grid[np.argmax(curves, axis=0)]
    return locs


# -- model comparison -------------------------------------------------------------


def _same_data(a, b):
    da, db = a.model.data, b.model.data
    return da.n == db.n and np.array_equal(da.response, db.response)


def aic(fits, names=None, reference=None):
    """Marginal AIC table sorted by AIC; ``delta`` is relative to ``reference``."""
    if not fits:
        return []
    names = list(names) if names is not None else [f"model{k + 1}" for k in range(len(fits))]
    for f in fits[1:]:
        if not _same_data(fits[0], f):
            raise ValueError("fits were obtained on different datasets")
    rows = []
    for nm, f in zip(names, fits):
        k = f.n_params
        rows.append({"model": nm, "n_params": k, "loglik": f.loglik, "aic": -2.0 * f.loglik + 2.0 * k})
    ref = names.index(reference) if reference is not None else int(np.argmin([r["aic"] for r in rows]))
    for r in rows:
        r["delta"] = r["aic"] - rows[ref]["aic"]
    return sorted(rows, key=lambda r: (r["aic"], r["model"]))


@dataclass
class LRTResult:
    statistic: float
    df: int
    p_value: float
    boundary_warning: bool


def lrt(fit_null, fit_alt, df=None, tol=1e-6):
    """Likelihood-ratio test with a plain chi-square reference distribution."""
    if hasattr(fit_null, "loglik"):
        if not _same_data(fit_null, fit_alt):
            raise ValueError("fits were obtained on different datasets")
        l0, l1 = fit_null.loglik, fit_alt.loglik
        if df is None:
            df = fit_alt.n_params - fit_null.n_params
        bnd = bool(np.any(fit_null.boundary)) or bool(np.any(fit_alt.boundary))
    else:
        l0, l1 = float(fit_null), float(fit_alt)
        bnd = False
    if df is None or df < 1:
        raise ValueError("df must be a positive integer")
    stat = 2.0 * (l1 - l0)
    if stat < -tol * max(1.0, abs(l1)):
        raise ValueError(f"negative likelihood-ratio statistic {stat:.3g}: the larger model was not fitted to its optimum")
    stat = max(stat, 0.0)
    return LRTResult(statistic=stat, df=int(df), p_value=float(chi2.sf(stat, df)), boundary_warning=bnd)


# -- tables ---------------------------------------------------------------------------


def parameter_table(fit, alpha=0.05):
    z = norm.ppf(1.0 - alpha / 2.0)
    se = fit.se
    rows = []
    for j, nm in enumerate(fit.names):
        s = se[j] if np.isfinite(fit.vcov[j, j]) else np.nan
        rows.append(
            {
                "parameter": nm,
                "estimate": float(fit.params[j]),
                "se": float(s),
                "lower": float(fit.params[j] - z * s),
                "upper": float(fit.params[j] + z * s),
                "boundary": bool(fit.boundary[j]),
            }
        )
    return rows


def variance_components(fit):
    """Dispersions, per-level variances and correlations, smoothing variances."""
    model = fit.model
    parts = fit.parts()
    phi = model.phi_vector(parts["phi"])
    std = getattr(model.data, "standardization", {}) or {}
    rows = []
    for g, dg in enumerate(model.spec.dispersion_groups):
        # residual variance back on the response scale of a standardized group
        orig = float(phi[g]) * std[dg.id][1] ** 2 if dg.id in std else float(phi[g])
        rows.append({"component": "dispersion", "group": dg.id, "value": float(phi[g]), "original_scale": orig, "fixed": dg.fixed is not None})
    psi = model.psi_blocks(fit.params)
    for lv in model.levels:
        lat = model.level_latents[lv]
        if not lat:
            continue
        P = psi[lv]
        lname = model.spec.level_name(lv)
        for a, ka in enumerate(lat):
            rows.append(
                {"component": "variance", "group": f"{lname}:{model.latent_names[ka]}", "value": float(P[a, a]), "fixed": False}
            )
        for a in range(len(lat)):
            for b in range(a):
                den = np.sqrt(P[a, a] * P[b, b])
                rho = float(P[a, b] / den) if den > 0 else float("nan")
                rows.append(
                    {
                        "component": "correlation",
                        "group": f"{lname}:{model.latent_names[lat[a]]},{model.latent_names[lat[b]]}",
                        "value": rho,
                        "fixed": False,
                    }
                )
    for t in model.smooths:
        v = float(psi[t.name])
        rows.append({"component": "smooth_variance", "group": t.name, "value": v, "fixed": False})
        rows.append(
            {"component": "smoothing_parameter", "group": t.name, "value": 1.0 / v if v > 0 else float("inf"), "fixed": False}
        )
    for r in rows:
        r.setdefault("original_scale", r["value"])
    return rows
