"""Conditional modes, Laplace-approximate marginal likelihood and its maximisation.

For fixed outer parameters the integrand is

    g(u) = sum_i [w_i (y_i nu_i - d(nu_i)) + c_i] - ||u||^2 / (2 phi_1),

with ``w_i = 1 / phi_{g(i)}``. PIRLS finds its maximiser by Newton steps on
the sparse system ``(Z_L' V Z_L + I / phi_1) delta = grad g`` where
``Z_L = Z Lambda``. The Laplace value is

    l = g(u~) - 1/2 sum log d_ii - (r / 2) log phi_1,

the last term coming from the N(0, phi_1 I) density of ``u``.

Derivatives: the real iteration is run to convergence, then a short dual
pass restarts from ``u~`` with forced Newton steps. Because ``u~`` is a
fixed point of the Newton map, one step propagates exact first-order jets
and two steps exact second-order jets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Dual
from .sparse import NotPositiveDefiniteError, factorize

__all__ = [
    "FitResult",
    "InnerState",
    "Objective",
    "PIRLSError",
    "fit",
    "initial_values",
    "laplace_loglik",
    "loglik_hessian",
    "pirls",
    "result_at",
]

LOG2PI = math.log(2.0 * math.pi)
ZERO_START = 0.1  # start for variance factors given as exactly zero


class PIRLSError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class InnerState:
    u: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    V: np.ndarray  # working weights d''(nu) / phi
    W: np.ndarray  # 1 / phi per row
    g: float
    grad: np.ndarray
    factor: object
    iterations: int
    converged: bool


# -- row-level terms ---------------------------------------------------------------


def _row_terms_plain(model, nu, phi):
    """(loglik sum, mu, score w(y - mu), V) for plain arrays."""
    y, m = model.y, model.trials
    w = 1.0 / phi[model.disp_index]
    mu = np.empty_like(nu)
    V = np.empty_like(nu)
    ll = model.binom_const
    g = model.gauss_rows
    if g.size:
        mu[g] = nu[g]
        r = y[g] - nu[g]
        ll += -0.5 * float(np.sum(w[g] * r * r)) - 0.5 * float(np.sum(LOG2PI + np.log(phi[model.disp_index[g]])))
        V[g] = w[g]
    b = model.binom_rows
    if b.size:
        x = nu[b]
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        sp_ = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        ll += float(np.sum(y[b] * x - m[b] * sp_))
        mu[b] = m[b] * p
        V[b] = m[b] * p * (1.0 - p)
    return ll, mu, w * (y - mu), V, w


def _gauss_counts(model):
    c = getattr(model, "_gauss_counts", None)
    if c is None:
        c = np.bincount(model.disp_index[model.gauss_rows], minlength=model.G).astype(float)
        model._gauss_counts = c
    return c


def _row_terms_dual(model, nu, phi):
    """Dual counterpart of :func:`_row_terms_plain`."""
    n = model.n
    PQ = nu.PQ
    y, m = model.y, model.trials
    winv = ad.reciprocal(phi)
    w = winv[model.disp_index]
    score = Dual(np.zeros((n,) + PQ))
    V = Dual(np.zeros((n,) + PQ))
    ll = Dual.constant(model.binom_const, *PQ)
    g = model.gauss_rows
    if g.size:
        r = nu[g] * -1.0 + y[g]
        wg = w[g]
        wr = wg * r
        ll = ll - (wr * r).sum() * 0.5
        counts = _gauss_counts(model)
        used = np.flatnonzero(counts)
        ll = ll - (ad.log(phi[used]) * counts[used]).sum() * 0.5 - 0.5 * LOG2PI * g.size
        score[g] = wr
        V[g] = wg
    b = model.binom_rows
    if b.size:
        x = nu[b]
        p = ad.expit(x)
        ll = ll + (x * y[b] - ad.softplus(x) * m[b]).sum()
        score[b] = p * -m[b] + y[b]
        V[b] = p * (p * -1.0 + 1.0) * m[b]
    return ll, score, V


# -- objective ------------------------------------------------------------------------


class Objective:
    """Laplace log-likelihood of a lowered model with value/gradient caching.

    ``tol_g`` and ``tol_grad`` are the inner convergence thresholds
    (relative change in g, sup-norm of its gradient).
    """

    def __init__(self, model, max_inner=50, max_halvings=20, tol_g=1e-10, tol_grad=1e-8, backend=None):
        self.model = model
        self.max_inner = max_inner
        self.max_halvings = max_halvings
        self.tol_g = tol_g
        self.tol_grad = tol_grad
        self.backend = backend
        self.symbolic = model.symbolic
        self.u_warm = np.zeros(model.r)
        self._cache = {}
        self._order = []
        self.n_pirls = 0
        self.last_state = None

    # pieces depending only on the outer parameters
    def pieces(self, x):
        m = self.model
        parts = m.split(x)
        A = m.effective_loadings(parts["loadings"], parts["B"])
        zv = m.z_values(A)
        zl = m.zl_values(zv, parts["theta"])
        eta = m.fixed_predictor(A, parts["beta"])
        phi = m.phi_vector(parts["phi"])
        return zl, eta, phi

    def _plain_pieces(self, params):
        zl, eta, phi = self.pieces(Dual.constant(np.asarray(params, dtype=float)))
        return zl.val, eta.val, np.asarray(phi.val if isinstance(phi, Dual) else phi)

    # -- inner problem ----------------------------------------------------

    def _eval(self, zl, eta, phi, u):
        m = self.model
        nu = eta + m.row_sum @ (zl * u[m.zl_col])
        ll, mu, score, V, w = _row_terms_plain(m, nu, phi)
        phi1 = phi[0]
        g = ll - 0.5 * float(u @ u) / phi1
        return nu, mu, score, V, w, g

    def _hess_values(self, zl, V, phi1):
        m = self.model
        h = m.h_sum @ (zl[m.h_t1] * zl[m.h_t2] * V[m.h_row])
        h[m.h_diag] += 1.0 / phi1
        return h

    def pirls(self, params, u_start=None):
        """Conditional modes by Newton iteration with step-halving."""
        m = self.model
        zl, eta, phi = self._plain_pieces(params)
        if np.any(phi <= 0):
            raise PIRLSError("non-positive dispersion")
        phi1 = phi[0]
        u = np.zeros(m.r) if u_start is None else np.array(u_start, dtype=float)
        nu, mu, score, V, w, g = self._eval(zl, eta, phi, u)
        steps = 0
        while True:
            grad = m.col_sum @ (zl * score[m.zl_row]) - u / phi1
            fac = factorize(self.symbolic, self._hess_values(zl, V, phi1), backend=self.backend)
            state = InnerState(u, nu, mu, V, w, g, grad, fac, steps, False)
            if not np.all(np.isfinite(grad)):
                raise PIRLSError("non-finite gradient in inner iteration", state)
            if m.r == 0 or np.max(np.abs(grad)) <= self.tol_grad:
                state.converged = True
                break
            if steps >= self.max_inner:
                raise PIRLSError(f"inner iteration did not converge in {self.max_inner} steps", state)
            delta = fac.solve(grad)
            tau = 1.0
            for _ in range(self.max_halvings + 1):
                u_new = u + tau * delta
                out = self._eval(zl, eta, phi, u_new)
                if np.isfinite(out[-1]) and out[-1] >= g:
                    break
                tau *= 0.5
            else:
                # no ascent left at rounding level: u is already the mode
                if float(grad @ delta) <= 1e-9 * (1.0 + abs(g)):
                    state.converged = True
                    break
                raise PIRLSError("step-halving failed to increase g", state)
            g_old = g
            u = u_new
            nu, mu, score, V, w, g = out
            steps += 1
            if abs(g - g_old) <= self.tol_g * (1.0 + abs(g)):
                grad = m.col_sum @ (zl * score[m.zl_row]) - u / phi1
                fac = factorize(self.symbolic, self._hess_values(zl, V, phi1), backend=self.backend)
                state = InnerState(u, nu, mu, V, w, g, grad, fac, steps, True)
                break
        self.n_pirls += 1
        return state

    def loglik_from_state(self, state, phi1):
        return state.g - 0.5 * state.factor.logdet() - 0.5 * self.model.r * math.log(phi1)

    # -- dual pass --------------------------------------------------------

    def dual_loglik(self, x, u_hat, steps=1):
        """Laplace value as a Dual, restarting Newton from ``u_hat``."""
        m = self.model
        zl, eta, phi = self.pieces(x)
        PQ = x.PQ
        u = Dual.constant(u_hat, *PQ)
        phi1 = phi[0]
        inv_phi1 = ad.reciprocal(phi1)
        zz = zl[m.h_t1] * zl[m.h_t2]  # independent of u, shared by all steps
        for k in range(steps + 1):
            nu = eta + ad.spmatmul(m.row_sum, zl * u[m.zl_col])
            ll, score, V = _row_terms_dual(m, nu, phi)
            hv = ad.spmatmul(m.h_sum, zz * V[m.h_row])
            hv[m.h_diag] = hv[m.h_diag] + inv_phi1
            fac = factorize(self.symbolic, hv, backend=self.backend)
            if k == steps:
                break
            grad = ad.spmatmul(m.col_sum, zl * score[m.zl_row]) - u * inv_phi1
            u = u + fac.solve(grad)
        g = ll - (u * u).sum() * inv_phi1 * 0.5
        out = g - fac.logdet() * 0.5
        if m.r:
            out = out - ad.log(phi1) * (0.5 * m.r)
        return out

    # -- value and gradient with caching --------------------------------

    def _key(self, x):
        return np.asarray(x, dtype=float).tobytes()

    def _store(self, key, entry):
        self._cache[key] = entry
        self._order.append(key)
        if len(self._order) > 64:
            self._cache.pop(self._order.pop(0), None)

    def value(self, params):
        params = np.asarray(params, dtype=float)
        key = self._key(params)
        hit = self._cache.get(key)
        if hit is not None:
            return hit["value"]
        state = self.pirls(params, self.u_warm)
        phi1 = self._plain_pieces(params)[2][0]
        val = self.loglik_from_state(state, phi1)
        self.u_warm = state.u
        self.last_state = state
        self._store(key, {"value": val, "state": state, "grad": None})
        return val

    def value_and_grad(self, params):
        params = np.asarray(params, dtype=float)
        key = self._key(params)
        val = self.value(params)
        entry = self._cache[key]
        if entry["grad"] is None:
            d = self.dual_loglik(Dual.seed(params), entry["state"].u, steps=1)
            entry["grad"] = np.array(d.d1)
        return val, entry["grad"].copy()

    def state(self, params):
        self.value(params)
        return self._cache[self._key(params)]["state"]

    def hessian(self, params, which=None):
        params = np.asarray(params, dtype=float)
        u_hat = self.state(params).u
        return ad.hessian(lambda xd: self.dual_loglik(xd, u_hat, steps=2), params, which)

    def hessian_diagonal(self, params):
        params = np.asarray(params, dtype=float)
        u_hat = self.state(params).u
        return ad.hessian_diagonal(lambda xd: self.dual_loglik(xd, u_hat, steps=2), params)


# -- functional wrappers --------------------------------------------------------------


def pirls(model, params, u_start=None, objective=None):
    obj = objective or Objective(model)
    return obj.pirls(params, u_start)


def laplace_loglik(model, params, objective=None):
    obj = objective or Objective(model)
    return obj.value(params)


def loglik_hessian(model, params, which=None, objective=None):
    obj = objective or Objective(model)
    return obj.hessian(params, which)


# -- initial values --------------------------------------------------------------


def initial_values(model, max_iter=25):
    """Fixed-effects GLM start for beta and dispersions; conventional starts otherwise.

    Free loadings start at their declared start value or +-1 by sign, B at
    its declared start, Lambda at the identity.
    """
    lay = model.layout
    loads = np.array(
        [
            model.loading_start.get(s, -1.0 if model.loading_sign.get(s) == "negative" else 1.0)
            for s in model.loading_symbols
        ]
    )
    theta = np.zeros(len(model.theta_names))
    theta[model.theta_diag] = 1.0
    parts = {"loadings": loads, "B": model.B_start.copy(), "theta": theta, "phi": np.ones(len(model.phi_free))}
    x0 = lay.pack(parts)
    X = model.update_designs(x0)[0]
    phi = model.phi_fixed.copy()
    beta = np.zeros(model.p_beta)
    if model.p_beta:
        for _ in range(max_iter):
            nu = X @ beta
            _, mu, score, V, w = _row_terms_plain(model, nu, phi)
            # working response, weights V
            z = nu + np.where(V > 0, score / np.where(V > 0, V, 1.0), 0.0)
            sw = np.sqrt(V)
            new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
            done = np.max(np.abs(new - beta)) <= 1e-10 * (1.0 + np.max(np.abs(new)))
            beta = new
            if done:
                break
    nu = X @ beta
    for g in model.phi_free:
        rows = model.gauss_rows[model.disp_index[model.gauss_rows] == g]
        if rows.size:
            res = model.y[rows] - nu[rows]
            phi[g] = max(float(np.mean(res * res)), 1e-4)
    parts["beta"] = beta
    parts["phi"] = phi[model.phi_free]
    return lay.pack(parts)


# -- outer optimisation ------------------------------------------------------------


@dataclass
class FitResult:
    model: object
    params: np.ndarray
    loglik: float
    u_hat: np.ndarray
    vcov: np.ndarray
    hessian_which: np.ndarray
    convergence: dict
    history: list = field(default_factory=list)
    init: np.ndarray = None
    edf: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.model.layout

    @property
    def names(self):
        return list(self.model.layout.names)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def boundary(self):
        return np.asarray(self.convergence["boundary"], dtype=bool)

    @property
    def converged(self):
        return bool(self.convergence["converged"])

    @property
    def n_params(self):
        return self.model.layout.size

    def parts(self):
        return self.model.layout.unpack(self.params)

    def get(self, name):
        return float(self.params[self.model.layout.index(name)])


def _projected_gradient(x, g, lo, hi):
    pg = g.copy()
    at_lo = (x <= lo) & (g < 0)
    at_hi = (x >= hi) & (g > 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def _snap_boundary(obj, x, lo, tol=1e-4):
    """Move near-zero variance factors onto the bound when that does not lower l."""
    m = obj.model
    base = obj.value(x)
    for j in m.layout.variance_diag:
        if lo[j] == 0.0 and 0.0 < abs(x[j]) < tol:
            trial = x.copy()
            trial[j] = 0.0
            try:
                v = obj.value(trial)
            except (PIRLSError, NotPositiveDefiniteError):
                continue
            if v >= base - 1e-8 * (1.0 + abs(base)):
                x, base = trial, v
    return x


def fit(model, init=None, max_iter=500, tol=1e-5, ftol=1e-9, hessian=True, objective=None, memory=10, scale=True):
    """Maximise the Laplace log-likelihood with L-BFGS-B.

    Converged when the sup-norm of the projected gradient is at most
    ``tol * (1 + |l|)`` or the relative change in ``l`` falls below ``ftol``.
    With ``scale`` the optimizer works on ``z = s * x`` where ``s`` is the
    root of the Hessian diagonal at the start, which evens out curvature
    across dispersions, loadings and variance parameters.
    """
    obj = objective or Objective(model)
    lay = model.layout
    x0 = initial_values(model) if init is None else np.asarray(init, dtype=float).copy()
    lo, hi = lay.lower, lay.upper
    x0 = np.clip(x0, lo, hi)
    # theta = 0 is stationary, so a variance factor started there never moves
    vd = lay.variance_diag
    x0[vd[x0[vd] <= lo[vd]]] = ZERO_START
    history = []
    failures = []

    v0 = obj.value(x0)
    history.append(v0)
    gtol = tol * (1.0 + abs(v0))

    def run(start, scaled):
        s = _curvature_scale(obj, start) if scaled else np.ones_like(start)

        def f(z):
            x = np.clip(z / s, lo, hi)
            try:
                v, g = obj.value_and_grad(x)
                g = g / s
            except (PIRLSError, NotPositiveDefiniteError, FloatingPointError, ad.NonDifferentiableError) as exc:
                failures.append((x.copy(), str(exc)))
                ref = history[-1] if history else 0.0
                return 1e10 * (1.0 + abs(ref)), np.zeros_like(x)
            if not np.isfinite(v) or not np.all(np.isfinite(g)):
                failures.append((x.copy(), "non-finite likelihood"))
                ref = history[-1] if history else 0.0
                return 1e10 * (1.0 + abs(ref)), np.zeros_like(x)
            return -v, -g

        def callback(zk):
            history.append(obj.value(np.clip(zk / s, lo, hi)))

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                f,
                start * s,
                jac=True,
                method="L-BFGS-B",
                bounds=list(zip(lo * s, hi * s)),
                callback=callback,
                options={"maxiter": max_iter, "maxcor": memory, "ftol": ftol, "gtol": gtol / s.max(), "maxls": 40},
            )
        return np.clip(res.x / s, lo, hi), res

    x, res = run(x0, scale)
    # theta = 0 is a stationary point of l, so a variance factor that lands on
    # its bound can be stuck there; restart once, unscaled, with it moved back inside
    vd = lay.variance_diag
    stuck = vd[(x[vd] <= lo[vd]) & (x0[vd] > lo[vd])]
    if stuck.size:
        start = x.copy()
        start[stuck] = x0[stuck]
        try:
            x2, res2 = run(start, False)
            if obj.value(x2) > obj.value(x) + 1e-8 * (1.0 + abs(history[-1])):
                x, res = x2, res2
        except (PIRLSError, NotPositiveDefiniteError):
            pass
    x = _snap_boundary(obj, x, lo)
    val, g = obj.value_and_grad(x)
    pg = _projected_gradient(x, g, lo, hi)
    pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
    rel_change = abs(history[-1] - history[-2]) / max(1.0, abs(history[-1])) if len(history) > 1 else np.inf
    converged = bool(
        res.nit < max_iter and (pg_norm <= tol * (1.0 + abs(val)) or rel_change <= ftol or res.success)
    )
    boundary = (x <= lo) | (x >= hi)
    state = obj.state(x)
    which = np.flatnonzero(~boundary)
    p = lay.size
    vcov = np.full((p, p), np.nan)
    H = None
    hess_info = "skipped"
    if hessian and which.size:
        H = obj.hessian(x, which)
        vc, hess_info = _invert_negative(H)
        vcov[np.ix_(which, which)] = vc
    conv = {
        "converged": converged,
        "iterations": int(res.nit),
        "evaluations": int(res.nfev),
        "message": str(res.message),
        "projected_gradient": pg_norm,
        "relative_change": float(rel_change),
        "boundary": boundary.tolist(),
        "hessian": hess_info,
        "failures": len(failures),
        "inner_steps": int(state.iterations),
    }
    out = FitResult(
        model=model,
        params=x,
        loglik=float(val),
        u_hat=state.u.copy(),
        vcov=vcov,
        hessian_which=which,
        convergence=conv,
        history=history,
        init=x0,
    )
    out.hessian_matrix = H
    _attach_edf(out)
    return out


def _attach_edf(out):
    from .inference import edf as _edf

    try:
        out.edf = {t.name: _edf(t.name, out) for t in out.model.smooths}
    except (ArithmeticError, np.linalg.LinAlgError):
        out.edf = {}


def result_at(model, params, vcov=None, convergence=None, objective=None):
    """A FitResult at given parameter values, e.g. estimates read back from disk.

    The conditional modes are recomputed; the covariance comes from ``vcov``
    when supplied and from the Hessian otherwise.
    """
    obj = objective or Objective(model)
    lay = model.layout
    x = np.asarray(params, dtype=float)
    if x.size != lay.size:
        raise ValueError(f"expected {lay.size} parameters, got {x.size}")
    val = obj.value(x)
    state = obj.state(x)
    boundary = (x <= lay.lower) | (x >= lay.upper)
    which = np.flatnonzero(~boundary)
    H = None
    if vcov is None:
        vcov = np.full((lay.size, lay.size), np.nan)
        if which.size:
            H = obj.hessian(x, which)
            vc, info = _invert_negative(H)
            vcov[np.ix_(which, which)] = vc
    conv = {"converged": True, "iterations": 0, "evaluations": 0, "message": "evaluated at given parameters", "boundary": boundary.tolist()}
    if convergence:
        conv.update(convergence)
    out = FitResult(model=model, params=x.copy(), loglik=float(val), u_hat=state.u.copy(), vcov=np.asarray(vcov, dtype=float), hessian_which=which, convergence=conv, init=x.copy())
    out.hessian_matrix = H
    _attach_edf(out)
    return out


def _curvature_scale(obj, x):
    try:
        d = np.abs(obj.hessian_diagonal(x))
    except (PIRLSError, NotPositiveDefiniteError, FloatingPointError, ad.NonDifferentiableError):
        return np.ones_like(x)
    if not np.all(np.isfinite(d)) or d.max() <= 0:
        return np.ones_like(x)
    d = np.maximum(d, 1e-6 * d.max())
    return np.sqrt(d)


def _invert_negative(H):
    """``-H^{-1}``; restricted to the invertible subspace when H is singular."""
    A = -0.5 * (H + H.T)
    w, Q = np.linalg.eigh(A)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    keep = w > 1e-10 * scale
    if np.all(keep):
        return Q @ np.diag(1.0 / w) @ Q.T, "ok"
    vc = (Q[:, keep] / w[keep]) @ Q[:, keep].T
    return vc, f"singular: {int((~keep).sum())} direction(s) dropped"
