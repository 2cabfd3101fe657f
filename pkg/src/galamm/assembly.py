"""Lowering of a GALAMM to mixed-model form.

The linear predictor is written as ``nu = X(lambda, B) beta + Z(lambda, B) Lambda u``
with ``u ~ N(0, phi_1 I)``. Latent variables enter through the reduced form
``eta = T (Gamma w + h(w) + zeta)``, ``T = (I - B)^{-1}``, so an observation
``i`` sees latent ``k`` with effective loading ``A[i, k] = sum_j a[i, j] T[j, k]``,
where ``a[i, j]`` is its loading on latent ``j``. Every nonzero of ``Z`` and
every latent-dependent column of ``X`` is a column of ``A`` times a constant,
which is how parameter updates reach the design matrices: values are always
recomputed from the stored constants, never compounded.

Random effects are ordered by level, then unit, then latent variable; the
penalised spline coefficients form a final block after the highest level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Dual
from .families import log_binom
from .splines import absorb_sum_to_zero, build_basis, to_mixed

__all__ = [
    "AssemblyError",
    "LoweredModel",
    "ParameterLayout",
    "lower",
]

PHI_MIN = 1e-10


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterLayout:
    """Packing of the outer parameter vector.

    Blocks appear in the order beta, theta (relative covariance factor),
    free loadings, free structural coefficients, free dispersions.
    """

    names: tuple
    blocks: dict  # block name -> slice
    lower: np.ndarray
    upper: np.ndarray
    variance_diag: np.ndarray  # indices of theta entries on a Lambda diagonal

    @property
    def size(self):
        return len(self.names)

    def bounds(self):
        lo = [None if not np.isfinite(v) else float(v) for v in self.lower]
        hi = [None if not np.isfinite(v) else float(v) for v in self.upper]
        return list(zip(lo, hi))

    def pack(self, parts):
        x = np.zeros(self.size)
        for name, sl in self.blocks.items():
            v = np.asarray(parts.get(name, np.zeros(sl.stop - sl.start)), dtype=float)
            if v.size != sl.stop - sl.start:
                raise ValueError(f"block {name!r} needs {sl.stop - sl.start} values, got {v.size}")
            x[sl] = v
        return x

    def unpack(self, x):
        if len(x) != self.size:
            raise ValueError(f"packed vector has length {len(x)}, layout expects {self.size}")
        return {name: x[sl] for name, sl in self.blocks.items()}

    def index(self, name):
        return self.names.index(name)


@dataclass
class SmoothTerm:
    name: str
    covariate: str
    target: str  # "predictor" or latent name
    latent: int  # latent index for latent smooths, -1 otherwise
    level: int  # level of the unit the covariate lives on (1 for predictor smooths)
    mixed: object  # splines.MixedSmooth
    rows: np.ndarray  # rows the term touches
    beta_cols: np.ndarray  # columns of X holding the unpenalised part
    u_cols: np.ndarray  # positions in u of the penalised part
    theta_index: int


def _pairs_within_rows(rows, n_rows):
    """All (e1, e2) with e1 <= e2 among entries sharing a row."""
    order = np.argsort(rows, kind="stable")
    counts = np.bincount(rows, minlength=n_rows)
    starts = np.concatenate([[0], np.cumsum(counts)])
    t1, t2, tr = [], [], []
    for c in np.unique(counts):
        if c == 0:
            continue
        rr = np.flatnonzero(counts == c)
        iu, ju = np.triu_indices(c)
        base = starts[rr][:, None]
        e1 = order[base + iu[None, :]]
        e2 = order[base + ju[None, :]]
        t1.append(e1.ravel())
        t2.append(e2.ravel())
        tr.append(np.repeat(rr, iu.size))
    if not t1:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    return np.concatenate(t1), np.concatenate(t2), np.concatenate(tr)


def _sum_matrix(target, n_target):
    """Sparse matrix that sums entries into ``target`` slots."""
    m = target.size
    return sp.csr_matrix((np.ones(m), (target, np.arange(m))), shape=(n_target, m))


def _cat(duals, axis):
    return Dual(np.concatenate([d.c for d in duals], axis=axis))


def _const(x, PQ):
    return Dual.constant(x, *PQ)


class LoweredModel:
    """Assembled mixed-form model with parameter-dependent update maps."""

    def __init__(self, spec, data, smooth_bases=None):
        self.spec = spec
        self.data = data
        self.n = data.n
        self._build_rows()
        self._build_latent()
        self._build_loadings()
        self._build_structural()
        self._build_smooths(smooth_bases)
        self._build_fixed()
        self._build_random()
        self._build_layout()
        self._build_sums()

    # -- construction --------------------------------------------------------

    def _build_rows(self):
        spec, ds = self.spec, self.data
        self.y = np.asarray(ds.response, dtype=float)
        self.trials = np.asarray(ds.trials, dtype=float)
        self.item_index = np.array([spec.items.index(it) for it in ds.item], dtype=np.int64)
        kinds = np.array([spec.family_of(g).kind for g in ds.family_group])
        self.binom_rows = np.flatnonzero(kinds == "binomial")
        self.gauss_rows = np.flatnonzero(kinds == "gaussian")
        self.disp_index = np.array([spec.dispersion_index(g) for g in ds.dispersion_group], dtype=np.int64)
        self.G = len(spec.dispersion_groups)
        self.binom_const = float(np.sum(log_binom(self.trials[self.binom_rows], self.y[self.binom_rows])))

    def _build_latent(self):
        spec, ds = self.spec, self.data
        self.latent_names = spec.latent_names
        self.K = len(self.latent_names)
        self.latent_level = np.array([lt.level for lt in spec.latent], dtype=np.int64)
        self.levels = sorted(lv.level for lv in spec.levels)
        self.level_sizes = {lv: ds.level_sizes[lv] for lv in self.levels}
        self.unit_of = {lv: ds.units[lv] for lv in self.levels}

    def _cov(self, name):
        if name is None:
            return np.ones(self.n)
        x = self.data.covariates.get(name)
        if x is None:
            raise AssemblyError(f"covariate {name!r} missing from data")
        return np.asarray(x, dtype=float)

    def _build_loadings(self):
        spec = self.spec
        n, K = self.n, self.K
        symbols = []
        sign = {}
        start = {}
        for ld in spec.loadings:
            if not ld.fixed and ld.symbol not in symbols:
                symbols.append(ld.symbol)
                sign[ld.symbol] = ld.sign
                if ld.start is not None:
                    start[ld.symbol] = ld.start
        self.loading_symbols = symbols
        a_const = np.zeros((n, K))
        rows_m, cols_m, vals_m = [], [], []
        self.loading_mask = np.zeros((n, K), dtype=bool)
        item_of = np.asarray(self.data.item)
        for ld in spec.loadings:
            k = self.latent_names.index(ld.latent)
            rows = np.flatnonzero(np.isin(item_of, ld.items))
            w = self._cov(ld.covariate)[rows]
            self.loading_mask[rows, k] = True
            if ld.fixed:
                a_const[rows, k] += ld.value * w
            else:
                s = symbols.index(ld.symbol)
                rows_m.append(rows * K + k)
                cols_m.append(np.full(rows.size, s))
                vals_m.append(w)
        self.a_const = a_const
        if symbols:
            self.a_map = sp.csr_matrix(
                (np.concatenate(vals_m), (np.concatenate(rows_m), np.concatenate(cols_m))),
                shape=(n * K, len(symbols)),
            )
        else:
            self.a_map = None
        self.loading_sign = sign
        self.loading_start = start

    def _build_structural(self):
        spec = self.spec
        K = self.K
        B_const = np.zeros((K, K))
        free = []
        starts = []
        for st in spec.structural:
            i = self.latent_names.index(st.target)
            j = self.latent_names.index(st.source)
            if not i < j:
                raise AssemblyError("structural matrix is not strictly upper triangular after ordering")
            if st.value is None:
                free.append((i, j))
                starts.append(st.start)
            else:
                B_const[i, j] = st.value
        self.B_const = B_const
        self.B_free = free
        self.B_start = np.asarray(starts, dtype=float)
        # structural reachability: T[j, k] can be nonzero
        reach = np.eye(K, dtype=bool)
        adj = (B_const != 0) | np.isin(np.arange(K * K).reshape(K, K), [i * K + j for i, j in free])
        for _ in range(K):
            reach = reach | ((reach.astype(int) @ adj.astype(int)) > 0)
        self.T_mask = reach
        self.A_mask = (self.loading_mask.astype(int) @ reach.astype(int)) > 0

    def _unit_values(self, x, level):
        """Per-unit covariate values at ``level`` (first occurrence)."""
        u = self.unit_of[level]
        vals = np.full(self.level_sizes[level], np.nan)
        first = np.unique(u, return_index=True)
        vals[first[0]] = x[first[1]]
        return vals

    def _build_smooths(self, smooth_bases):
        spec = self.spec
        self.smooths = []
        item_of = np.asarray(self.data.item)
        for s_idx, sm in enumerate(spec.smooths):
            x = self._cov(sm.covariate)
            if sm.target == "predictor":
                rows = np.flatnonzero(np.isin(item_of, sm.items)) if sm.items else np.arange(self.n)
                xs = x[rows]
                level, latent = 1, -1
            else:
                latent = self.latent_names.index(sm.target)
                level = int(self.latent_level[latent])
                rows = np.flatnonzero(self.A_mask[:, latent])
                xs = self._unit_values(x, level)
                present = np.zeros(self.level_sizes[level], dtype=bool)
                present[self.unit_of[level][rows]] = True
                xs = xs[present]
            if smooth_bases is not None and sm.name in smooth_bases:
                mixed = smooth_bases[sm.name]
            else:
                basis = build_basis(xs, sm.k)
                if sm.constrained:
                    basis = absorb_sum_to_zero(basis)
                mixed = to_mixed(basis)
            if mixed.X_F.shape[0] != xs.size and smooth_bases is not None:
                raise AssemblyError(f"smooth {sm.name!r}: basis rows do not match the data")
            self.smooths.append(
                SmoothTerm(
                    name=sm.name,
                    covariate=sm.covariate,
                    target=sm.target,
                    latent=latent,
                    level=level,
                    mixed=mixed,
                    rows=rows,
                    beta_cols=np.zeros(0, dtype=np.int64),
                    u_cols=np.zeros(0, dtype=np.int64),
                    theta_index=-1,
                )
            )

    def _smooth_row_design(self, term):
        """(F, R) design rows for ``term.rows`` in row space."""
        x = self._cov(term.covariate)[term.rows]
        F, R = term.mixed.design_at(x)
        return F, R

    def _build_fixed(self):
        spec = self.spec
        n = self.n
        item_of = np.asarray(self.data.item)
        const_cols, names = [], []
        lat_cols = []  # (column, latent, weight vector)
        for rg in spec.regressions:
            w = self._cov(rg.covariate)
            if rg.target == "predictor":
                items = rg.items or spec.items
                if rg.per_item:
                    for it in items:
                        col = np.where(item_of == it, w, 0.0)
                        const_cols.append(col)
                        names.append(f"{rg.name}[{it}]")
                else:
                    col = np.where(np.isin(item_of, items), w, 0.0)
                    const_cols.append(col)
                    names.append(rg.name)
            else:
                k = self.latent_names.index(rg.target)
                lat_cols.append((len(names), k, w.copy()))
                const_cols.append(np.zeros(n))
                names.append(rg.name)
        for term in self.smooths:
            F, _ = self._smooth_row_design(term)
            cols = []
            for c in range(F.shape[1]):
                full = np.zeros(n)
                full[term.rows] = F[:, c]
                if term.latent < 0:
                    const_cols.append(full)
                else:
                    lat_cols.append((len(names), term.latent, full))
                    const_cols.append(np.zeros(n))
                cols.append(len(names))
                names.append(f"s({term.name})[F{c + 1}]")
            term.beta_cols = np.asarray(cols, dtype=np.int64)
        self.beta_names = names
        self.p_beta = len(names)
        self.X_const = np.column_stack(const_cols) if const_cols else np.zeros((n, 0))
        self.lat_cols = np.asarray([c for c, _, _ in lat_cols], dtype=np.int64)
        self.lat_k = np.asarray([k for _, k, _ in lat_cols], dtype=np.int64)
        self.lat_w = np.column_stack([w for _, _, w in lat_cols]) if lat_cols else np.zeros((n, 0))

    def _build_random(self):
        """Z pattern, Lambda template and the Z Lambda products."""
        spec = self.spec
        # u layout for latent disturbances
        self.u_offset = {}
        self.level_latents = {}
        off = 0
        for lv in self.levels:
            lat = [k for k in range(self.K) if self.latent_level[k] == lv]
            self.level_latents[lv] = lat
            self.u_offset[lv] = off
            off += self.level_sizes[lv] * len(lat)
        self.r_latent = off

        # theta template per level: entries (m, m') lower triangular
        theta_names, theta_entries, diag_idx = [], [], []
        self.lambda_blocks = {}
        for lv in self.levels:
            lat = self.level_latents[lv]
            M = len(lat)
            if M == 0:
                continue
            cs = spec.covariance_for(lv)
            if cs.structure == "diagonal":
                groups = [[m] for m in range(M)]
            elif cs.structure == "unstructured":
                groups = [list(range(M))]
            else:
                groups = [[lat.index(self.latent_names.index(nm)) for nm in b] for b in cs.blocks]
            entries = {}
            for grp in groups:
                grp = sorted(grp)
                for a_, ma in enumerate(grp):
                    for mb in grp[: a_ + 1]:
                        entries[(ma, mb)] = len(theta_names)
                        if ma == mb:
                            diag_idx.append(len(theta_names))
                        theta_names.append(
                            f"theta[{spec.level_name(lv)}:{self.latent_names[lat[ma]]},{self.latent_names[lat[mb]]}]"
                        )
                        theta_entries.append((lv, ma, mb))
            self.lambda_blocks[lv] = entries
        # smooth blocks
        off_u = self.r_latent
        for term in self.smooths:
            r = term.mixed.r
            term.u_cols = np.arange(off_u, off_u + r)
            off_u += r
            term.theta_index = len(theta_names)
            diag_idx.append(len(theta_names))
            theta_names.append(f"theta[smooth:{term.name}]")
            theta_entries.append((None, term.name, None))
        self.r = off_u
        self.theta_names = theta_names
        self.theta_entries = theta_entries
        self.theta_diag = np.asarray(diag_idx, dtype=np.int64)

        # Z nonzeros: (row, col, A-column or K for ones, constant)
        z_row, z_col, z_k, z_const, z_lat = [], [], [], [], []
        for lv in self.levels:
            lat = self.level_latents[lv]
            M = len(lat)
            units = self.unit_of[lv]
            for m, k in enumerate(lat):
                rows = np.flatnonzero(self.A_mask[:, k])
                z_row.append(rows)
                z_col.append(self.u_offset[lv] + units[rows] * M + m)
                z_k.append(np.full(rows.size, k))
                z_const.append(np.ones(rows.size))
                z_lat.append(np.full(rows.size, m))
        for term in self.smooths:
            _, R = self._smooth_row_design(term)
            rr = np.repeat(term.rows, R.shape[1])
            cc = np.tile(term.u_cols, term.rows.size)
            z_row.append(rr)
            z_col.append(cc)
            z_k.append(np.full(rr.size, term.latent if term.latent >= 0 else self.K))
            z_const.append(R.ravel())
            z_lat.append(np.full(rr.size, -1))
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)  # noqa: E731
        self.z_row = cat(z_row, np.int64)
        self.z_col = cat(z_col, np.int64)
        self.z_k = cat(z_k, np.int64)
        self.z_const = cat(z_const, float)
        z_m = cat(z_lat, np.int64)

        # Z Lambda triples: ZL[i, (lv, unit, m')] += Z[i, (lv, unit, m)] * Lambda[m, m']
        t_z, t_theta, t_row, t_col = [], [], [], []
        smooth_theta = {term.name: term.theta_index for term in self.smooths}
        col_level = np.full(self.r, -1)
        for lv in self.levels:
            M = len(self.level_latents[lv])
            col_level[self.u_offset[lv] : self.u_offset[lv] + self.level_sizes[lv] * M] = lv
        is_spline = z_m < 0
        sp_idx = np.flatnonzero(is_spline)
        if sp_idx.size:
            th = np.empty(sp_idx.size, dtype=np.int64)
            for term in self.smooths:
                sel = np.isin(self.z_col[sp_idx], term.u_cols)
                th[sel] = smooth_theta[term.name]
            t_z.append(sp_idx)
            t_theta.append(th)
            t_row.append(self.z_row[sp_idx])
            t_col.append(self.z_col[sp_idx])
        for lv, entries in self.lambda_blocks.items():
            M = len(self.level_latents[lv])
            for (ma, mb), ti in entries.items():
                sel = np.flatnonzero((~is_spline) & (col_level[self.z_col] == lv) & (z_m == ma))
                if sel.size == 0:
                    continue
                t_z.append(sel)
                t_theta.append(np.full(sel.size, ti))
                t_row.append(self.z_row[sel])
                t_col.append(self.z_col[sel] - ma + mb)
        t_z, t_theta = cat(t_z, np.int64), cat(t_theta, np.int64)
        t_row, t_col = cat(t_row, np.int64), cat(t_col, np.int64)
        key = t_row * self.r + t_col
        ukey, inv = np.unique(key, return_inverse=True)
        self.zl_row = ukey // self.r
        self.zl_col = ukey % self.r
        self.t_z, self.t_theta = t_z, t_theta
        self.zl_sum = _sum_matrix(inv, ukey.size)

    def _build_layout(self):
        spec = self.spec
        names, blocks, lo, hi = [], {}, [], []

        def add(block, nm, l, h):
            start = len(names)
            names.extend(nm)
            lo.extend(l)
            hi.extend(h)
            blocks[block] = slice(start, len(names))

        p = self.p_beta
        add("beta", self.beta_names, [-np.inf] * p, [np.inf] * p)
        t_lo = np.full(len(self.theta_names), -np.inf)
        t_lo[self.theta_diag] = 0.0
        add("theta", self.theta_names, list(t_lo), [np.inf] * len(self.theta_names))
        l_lo, l_hi = [], []
        for s in self.loading_symbols:
            sg = self.loading_sign.get(s)
            l_lo.append(0.0 if sg == "positive" else -np.inf)
            l_hi.append(0.0 if sg == "negative" else np.inf)
        add("loadings", list(self.loading_symbols), l_lo, l_hi)
        b_names = [f"B[{self.latent_names[i]}<-{self.latent_names[j]}]" for i, j in self.B_free]
        add("B", b_names, [-np.inf] * len(b_names), [np.inf] * len(b_names))
        self.phi_free = [g for g, dg in enumerate(spec.dispersion_groups) if dg.fixed is None]
        self.phi_fixed = np.array([1.0 if dg.fixed is None else float(dg.fixed) for dg in spec.dispersion_groups])
        add(
            "phi",
            [f"phi[{spec.dispersion_groups[g].id}]" for g in self.phi_free],
            [PHI_MIN] * len(self.phi_free),
            [np.inf] * len(self.phi_free),
        )
        self.layout = ParameterLayout(
            names=tuple(names),
            blocks=blocks,
            lower=np.asarray(lo, dtype=float),
            upper=np.asarray(hi, dtype=float),
            variance_diag=blocks["theta"].start + self.theta_diag,
        )

    def _build_sums(self):
        """Constant summation maps for predictor, gradient and Hessian assembly."""
        n, r = self.n, self.r
        nz = self.zl_row.size
        self.row_sum = sp.csr_matrix((np.ones(nz), (self.zl_row, np.arange(nz))), shape=(n, nz))
        self.col_sum = sp.csr_matrix((np.ones(nz), (self.zl_col, np.arange(nz))), shape=(r, nz))
        t1, t2, trow = _pairs_within_rows(self.zl_row, n)
        self.h_t1, self.h_t2, self.h_row = t1, t2, trow
        # pattern of -H: Z_L' V Z_L + I / phi_1
        rows = np.concatenate([self.zl_col[t1], np.arange(r)])
        cols = np.concatenate([self.zl_col[t2], np.arange(r)])
        lo_, hi_ = np.minimum(rows, cols), np.maximum(rows, cols)
        self.H_pattern = sp.csc_matrix((np.ones(rows.size), (lo_, hi_)), shape=(r, r))
        self.H_pattern.sum_duplicates()
        self._symbolic = None

    # -- symbolic factorisation (computed once per model) -------------------

    @property
    def symbolic(self):
        if self._symbolic is None:
            from .sparse import analyze

            s = analyze(self.H_pattern)
            self._set_symbolic(s)
        return self._symbolic

    def _set_symbolic(self, s):
        r = self.r
        t1, t2 = self.h_t1, self.h_t2
        pos = s.position(self.zl_col[t1], self.zl_col[t2])
        self.h_sum = _sum_matrix(pos, s.nnz_A)
        self.h_diag = s.position(np.arange(r), np.arange(r))
        self._symbolic = s

    def share_symbolic(self, other):
        """Reuse the symbolic analysis of a model with the identical pattern."""
        if other.r != self.r or (other.H_pattern != self.H_pattern).nnz:
            raise AssemblyError("patterns differ; cannot share symbolic analysis")
        self._set_symbolic(other.symbolic)

    # -- reporting helpers --------------------------------------------------------

    @property
    def sparsity(self):
        """Fraction of structural zeros in Z."""
        nnz = np.unique(self.z_row * self.r + self.z_col).size
        return 1.0 - nnz / max(1, self.n * self.r)

    @property
    def p(self):
        return self.layout.size

    def phi_vector(self, phi_free):
        """Dispersion per group (plain or Dual)."""
        if isinstance(phi_free, Dual):
            c = np.zeros((self.G,) + phi_free.PQ)
            c[:, 0, 0] = self.phi_fixed
            if self.phi_free:
                c[self.phi_free] = phi_free.c
            return Dual(c)
        phi = self.phi_fixed.copy()
        phi[self.phi_free] = phi_free
        return phi

    # -- parameter-dependent pieces (generic over Dual) ----------------------

    def T_matrix(self, bfree):
        """``(I - B)^{-1}`` as a Dual, by back-substitution (B strictly upper)."""
        K = self.K
        PQ = bfree.PQ
        Bc = np.zeros((K, K) + PQ)
        Bc[..., 0, 0] = self.B_const
        for t, (i, j) in enumerate(self.B_free):
            Bc[i, j] = bfree.c[t]
        B = Dual(Bc)
        T = Dual(np.zeros((K, K) + PQ))
        for i in range(K - 1, -1, -1):
            row = _const(np.eye(K)[i], PQ)
            for j in range(i + 1, K):
                if self.T_mask[i, j]:
                    row = row + B[i, j] * T[j]
            T[i] = row
        return T

    def effective_loadings(self, lam, bfree):
        """``A = a T`` with one column per latent variable plus a column of ones."""
        n, K = self.n, self.K
        PQ = lam.PQ
        a = _const(self.a_const.ravel(), PQ)
        if self.a_map is not None:
            a = a + ad.spmatmul(self.a_map, lam)
        a = a.reshape(n, K)
        if self.B_free:
            T = self.T_matrix(bfree)
            A = a @ T
        else:
            T = np.linalg.inv(np.eye(K) - self.B_const)
            A = a @ T
        ones = np.zeros((n, 1) + PQ)
        ones[:, 0, 0, 0] = 1.0
        return Dual(np.concatenate([A.c, ones], axis=1))

    def z_values(self, A):
        return A[self.z_row, self.z_k] * self.z_const

    def zl_values(self, zv, theta):
        prod = zv[self.t_z] * theta[self.t_theta]
        return ad.spmatmul(self.zl_sum, prod)

    def fixed_predictor(self, A, beta):
        eta = ad.spmatmul(self.X_const, beta) if self.p_beta else _const(np.zeros(self.n), beta.PQ)
        if self.lat_cols.size:
            cols = A[:, self.lat_k] * self.lat_w
            b = Dual(beta.c[self.lat_cols][None])
            eta = eta + (cols * b).sum(axis=1)
        return eta

    def design_X(self, A):
        """Dense X at the current loadings (plain values)."""
        X = self.X_const.copy()
        Av = A.val if isinstance(A, Dual) else A
        for c, k, w in zip(self.lat_cols, self.lat_k, self.lat_w.T):
            X[:, c] = Av[:, k] * w
        return X

    def split(self, x):
        """Split a packed (Dual) vector into its blocks."""
        b = self.layout.blocks
        return {name: x[sl] for name, sl in b.items()}

    # -- public design views ------------------------------------------------------

    def _plain_parts(self, params):
        x = Dual.constant(np.asarray(params, dtype=float))
        parts = self.split(x)
        A = self.effective_loadings(parts["loadings"], parts["B"])
        return parts, A

    def update_designs(self, params):
        """``(X, Z)`` at the given packed parameters (scipy sparse Z)."""
        parts, A = self._plain_parts(params)
        zv = self.z_values(A).val
        Z = sp.csc_matrix((zv, (self.z_row, self.z_col)), shape=(self.n, self.r))
        return self.design_X(A), Z

    def reference_params(self):
        """Packed vector at the reference point: free loadings 1, free B 0."""
        parts = {
            "loadings": np.ones(len(self.loading_symbols)),
            "B": np.zeros(len(self.B_free)),
            "theta": np.where(np.isin(np.arange(len(self.theta_names)), self.theta_diag), 1.0, 0.0),
            "phi": np.ones(len(self.phi_free)),
        }
        return self.layout.pack(parts)

    @property
    def X0(self):
        return self.update_designs(self.reference_params())[0]

    @property
    def Z0(self):
        return self.update_designs(self.reference_params())[1]

    def build_lambda(self, theta):
        """Sparse lower-triangular relative covariance factor."""
        theta = np.asarray(theta, dtype=float)
        if np.any(theta[self.theta_diag] < 0):
            raise ValueError("Lambda diagonal entries must be non-negative")
        rows, cols, vals = [], [], []
        for lv, entries in self.lambda_blocks.items():
            M = len(self.level_latents[lv])
            base = self.u_offset[lv] + np.arange(self.level_sizes[lv]) * M
            for (ma, mb), ti in entries.items():
                rows.append(base + ma)
                cols.append(base + mb)
                vals.append(np.full(base.size, theta[ti]))
        for term in self.smooths:
            rows.append(term.u_cols)
            cols.append(term.u_cols)
            vals.append(np.full(term.u_cols.size, theta[term.theta_index]))
        if not rows:
            return sp.csc_matrix((self.r, self.r))
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.r, self.r)
        )

    def psi_blocks(self, params):
        """Covariance matrices ``phi_1 Lambda_l Lambda_l'`` per level and smoothing variances."""
        parts = self.layout.unpack(np.asarray(params, dtype=float))
        theta = parts["theta"]
        phi1 = self.phi_vector(parts["phi"])[0]
        out = {}
        for lv, entries in self.lambda_blocks.items():
            M = len(self.level_latents[lv])
            Lm = np.zeros((M, M))
            for (ma, mb), ti in entries.items():
                Lm[ma, mb] = theta[ti]
            out[lv] = phi1 * Lm @ Lm.T
        for term in self.smooths:
            out[term.name] = phi1 * theta[term.theta_index] ** 2
        return out

    def with_response(self, y):
        """Shallow copy with new responses; pattern and symbolic analysis shared."""
        import copy

        other = copy.copy(self)
        other.y = np.asarray(y, dtype=float)
        other.data = self.data.with_response(other.y)
        other.binom_const = float(np.sum(log_binom(self.trials[self.binom_rows], other.y[self.binom_rows])))
        return other


def lower(spec, data, bases=None):
    """Lower ``spec`` on ``data`` to mixed-model form.

    ``bases`` optionally maps smooth names to precomputed
    :class:`galamm.splines.MixedSmooth` objects.
    """
    for sm in spec.smooths:
        if sm.covariate not in data.covariates:
            raise AssemblyError(f"smooth {sm.name!r}: covariate {sm.covariate!r} not in data")
    model = LoweredModel(spec, data, bases)
    return model

