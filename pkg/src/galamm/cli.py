"""Command-line interface.

Subcommands: fit, bands, simulate, bootstrap, compare. Each writes CSV
tables and a ``manifest.yaml`` into ``--out`` and nowhere else. Exit
codes: 0 success, 1 input or usage error, 2 fit did not converge (results
are still written).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
import traceback

import numpy as np
import yaml

from . import __version__
from .assembly import AssemblyError, lower
from .data import DataError, load_dataset, write_dataset
from .estimation import PIRLSError, fit, result_at
from .inference import aic, latent_trajectory_bands, lrt, parameter_table, smooth_bands, variance_components
from .modelspec import SpecError, dump_spec, load_spec
from .simulate import DESIGNS, bootstrap, coverage_study, default_threads, power_study, replicate_rng, simulate_response, variance_boundary_study
from .simulate import base_fit as design_base_fit
from .sparse import NotPositiveDefiniteError

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2

INPUT_ERRORS = (SpecError, DataError, AssemblyError, FileNotFoundError, IsADirectoryError, ValueError, KeyError)


class UsageError(ValueError):
    pass


# -- formatting -----------------------------------------------------------------------


def fmt(v):
    """Shortest round-trip text for numbers; plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if v is None:
        return ""
    return str(v)


class Output:
    """Tracks every file written under the output directory."""

    def __init__(self, directory):
        self.dir = os.path.abspath(directory)
        os.makedirs(self.dir, exist_ok=True)
        self.files = []

    def path(self, name):
        p = os.path.join(self.dir, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def table(self, name, rows, columns=None):
        columns = columns or (list(rows[0].keys()) if rows else [])
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([fmt(r.get(c)) for c in columns])

    def manifest(self, info):
        info = dict(info)
        info["outputs"] = sorted(set(self.files) | {"manifest.yaml"})
        with open(os.path.join(self.dir, "manifest.yaml"), "w", encoding="utf-8") as fh:
            yaml.safe_dump(info, fh, sort_keys=False)


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def print_table(rows, columns=None, file=None):
    file = file or sys.stdout
    if not rows:
        return
    columns = columns or list(rows[0].keys())
    cells = [[fmt_short(r.get(c)) for c in columns] for r in rows]
    width = [max(len(c), *(len(x[k]) for x in cells)) for k, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, width)), file=file)
    for x in cells:
        print("  ".join(v.ljust(w) for v, w in zip(x, width)), file=file)


def fmt_short(v):
    if isinstance(v, (float, np.floating)) and math.isfinite(v):
        return f"{float(v):.6g}"
    return fmt(v)


def parse_floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_grid(text, lo_default, hi_default):
    """``N`` (N points over the data range), ``lo:hi:N``, or an explicit ``a,b,c`` list."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return np.linspace(float(a), float(b), int(n))
        if "," in text:
            return np.array(parse_floats(text))
        return np.linspace(lo_default, hi_default, int(text))
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; use N, lo:hi:N or a comma list") from None


# -- fit directories ------------------------------------------------------------------


def save_fit(out, f, prefix=""):
    model = f.model
    dump_spec(model.spec, out.path(prefix + "model.yaml"))
    write_dataset(model.data, out.path(prefix + "data.csv"), model.spec)
    out.table(prefix + "parameters.csv", parameter_table(f), ["parameter", "estimate", "se", "lower", "upper", "boundary"])
    vc = variance_components(f)
    out.table(prefix + "variance_components.csv", vc, ["component", "group", "value", "original_scale", "fixed"])
    names = f.names
    rows = [{"parameter": nm, **{m: f.vcov[i, j] for j, m in enumerate(names)}} for i, nm in enumerate(names)]
    out.table(prefix + "vcov.csv", rows, ["parameter"] + names)
    out.table(prefix + "modes.csv", [{"index": k, "u": float(v)} for k, v in enumerate(f.u_hat)], ["index", "u"])
    out.table(prefix + "edf.csv", [{"smooth": k, "edf": v} for k, v in f.edf.items()], ["smooth", "edf"])
    c = f.convergence
    summary = [
        ("loglik", f.loglik),
        ("n_params", f.n_params),
        ("aic", -2.0 * f.loglik + 2.0 * f.n_params),
        ("n", model.n),
        ("dropped_rows", model.data.dropped),
        ("converged", f.converged),
        ("iterations", c.get("iterations", 0)),
        ("evaluations", c.get("evaluations", 0)),
        ("projected_gradient", c.get("projected_gradient", float("nan"))),
        ("hessian", c.get("hessian", "")),
        ("message", c.get("message", "")),
    ]
    out.table(prefix + "fit_summary.csv", [{"quantity": k, "value": v} for k, v in summary], ["quantity", "value"])
    return summary


def load_fit(directory):
    """Rebuild a FitResult from a directory written by ``galamm fit``."""
    spec = load_spec(os.path.join(directory, "model.yaml"))
    data = load_dataset(os.path.join(directory, "data.csv"), spec, standardize=())
    model = lower(spec, data)
    ptab = read_table(os.path.join(directory, "parameters.csv"))
    if [r["parameter"] for r in ptab] != list(model.layout.names):
        raise DataError(f"{directory}/parameters.csv: parameter names do not match model.yaml")
    x = np.array([float(r["estimate"]) for r in ptab])
    vrows = read_table(os.path.join(directory, "vcov.csv"))
    vcov = np.array([[float(r[nm]) for nm in model.layout.names] for r in vrows])
    summ = {r["quantity"]: r["value"] for r in read_table(os.path.join(directory, "fit_summary.csv"))}
    conv = {"converged": summ.get("converged") == "true", "message": summ.get("message", "")}
    return result_at(model, x, vcov=vcov, convergence=conv)


# -- subcommands ----------------------------------------------------------------------


def cmd_fit(args, out, info):
    spec = load_spec(args.model)
    std = None
    if args.standardize is not None:
        std = tuple(s for s in args.standardize.split(",") if s)
    data = load_dataset(args.data, spec, standardize=std)
    model = lower(spec, data)
    info.update(config=os.path.abspath(args.model), data=os.path.abspath(args.data))
    if data.standardization:
        info["standardization"] = {g: {"mean": m, "sd": s} for g, (m, s) in data.standardization.items()}
    f = fit(model, max_iter=args.max_iter, tol=args.tol)
    summary = save_fit(out, f)
    info["convergence"] = {k: (v if isinstance(v, (str, bool, int)) else float(v)) for k, v in summary}
    if not args.quiet:
        print_table(parameter_table(f), ["parameter", "estimate", "se", "boundary"])
        print()
        print_table(variance_components(f), ["component", "group", "value"])
        print()
        print_table([{"quantity": k, "value": v} for k, v in summary])
    return EXIT_OK if f.converged else EXIT_NONCONVERGED


def _smooth_range(f, name):
    term = next((t for t in f.model.smooths if t.name == name), None)
    if term is None:
        known = ", ".join(t.name for t in f.model.smooths) or "none"
        raise UsageError(f"unknown smooth {name!r} (model has: {known})")
    x = f.model._cov(term.covariate)[term.rows]
    return term, float(x.min()), float(x.max())


def cmd_bands(args, out, info):
    f = load_fit(args.fit)
    info.update(fit=os.path.abspath(args.fit), seed=args.seed)
    term, lo, hi = _smooth_range(f, args.smooth)
    grid = parse_grid(args.grid, lo, hi)
    meta_cols = ["smooth", "curve", "edf", "z", "critical", "alpha", "n_sim", "seed"]
    if args.offsets is None:
        est = smooth_bands(f, args.smooth, grid, alpha=args.alpha, n_sim=args.nsim, seed=args.seed)
        cols = ["grid", "fhat", "se", "lo_pt", "hi_pt", "lo_sim", "hi_sim"]
        rows = [{c: getattr(est, c)[k] for c in cols} for k in range(grid.size)]
        out.table("bands.csv", rows, cols)
        meta = [{"smooth": args.smooth, "curve": "f", "edf": est.edf, "z": est.z, "critical": est.critical, "alpha": args.alpha, "n_sim": args.nsim, "seed": args.seed}]
        out.table("bands_meta.csv", meta, meta_cols)
        if not args.quiet:
            print_table(rows)
            print_table(meta)
        return EXIT_OK
    if not args.latent or not args.item:
        raise UsageError("--offsets needs --latent and --item")
    offsets = parse_floats(args.offsets)
    ests = latent_trajectory_bands(
        f, args.smooth, args.latent, args.item, offsets, grid, alpha=args.alpha, n_sim=args.nsim, seed=args.seed, sd=args.sd
    )
    rows = []
    cols = ["grid"]
    band = ["fhat", "se", "lo_pt", "hi_pt", "lo_sim", "hi_sim"]
    for o in offsets:
        cols += [f"{c}[{fmt(float(o))}]" for c in band]
    for k in range(grid.size):
        r = {"grid": grid[k]}
        for o, e in zip(offsets, ests):
            for c in band:
                r[f"{c}[{fmt(float(o))}]"] = getattr(e, c)[k]
        rows.append(r)
    out.table("trajectories.csv", rows, cols)
    meta = [
        {"smooth": args.smooth, "curve": f"offset={fmt(float(o))}", "edf": e.edf, "z": e.z, "critical": e.critical, "alpha": args.alpha, "n_sim": args.nsim, "seed": args.seed}
        for o, e in zip(offsets, ests)
    ]
    out.table("bands_meta.csv", meta, meta_cols)
    if not args.quiet:
        print_table(meta)
    return EXIT_OK


def _design(args, **extra):
    if args.design not in DESIGNS:
        raise UsageError(f"unknown design {args.design!r}; choose from {', '.join(sorted(DESIGNS))}")
    kw = dict(extra)
    if args.subjects is not None:
        kw["n_subjects"] = args.subjects
    return DESIGNS[args.design](seed=args.seed, **kw)


def cmd_simulate(args, out, info):
    info.update(design=args.design, seed=args.seed, replicates=args.replicates, study=args.study)
    threads = args.threads
    if args.study == "none":
        extra = {"lambda8": args.lambda8} if args.design == "ses-like" else {}
        d = _design(args, **extra)
        dump_spec(d.spec, out.path("model.yaml"))
        for v, sp in d.variants.items():
            dump_spec(sp, out.path(f"model_{v}.yaml"))
        model = d.model()
        if args.replicates <= 1:
            write_dataset(d.data, out.path("data.csv"), d.spec)
        else:
            width = len(str(args.replicates))
            for i in range(args.replicates):
                y = simulate_response(model, d.truth["params"], d.truth["u"], replicate_rng(args.seed, i))
                write_dataset(d.data.with_response(y), out.path(f"data_{i + 1:0{width}d}.csv"), d.spec)
        truth = [{"parameter": n, "value": v} for n, v in zip(model.layout.names, d.truth["params"])]
        out.table("truth.csv", truth, ["parameter", "value"])
        return EXIT_OK
    if args.study == "boundary":
        d = _design(args)
        bf = design_base_fit(d, hessian=False)
        ratios = parse_floats(args.ratios)
        rows, trend = variance_boundary_study(d, bf, ratios, args.replicates, seed=args.seed, threads=threads)
        out.table("boundary.csv", rows)
        out.table("boundary_trend.csv", [trend])
        if not args.quiet:
            print_table(rows)
            print_table([trend])
        return EXIT_OK
    if args.study == "power":
        d = _design(args)
        bf = design_base_fit(d, hessian=False)
        grid = parse_floats(args.lambda8_grid)
        rows, reps = power_study(d, bf, grid, args.replicates, seed=args.seed, threads=threads, alpha=args.alpha, n_rep_null=args.replicates_null)
        out.table("power.csv", rows)
        if args.save_replicates:
            flat = [{"lambda8_true": lam, **r} for lam, rs in reps.items() for r in rs]
            out.table("power_replicates.csv", flat, ["lambda8_true", "replicate", "statistic", "p", "reject", "aic_alt", "lambda8", "converged"])
        if not args.quiet:
            print_table(rows)
        return EXIT_OK
    if args.study == "coverage":
        d = _design(args)
        bf = design_base_fit(d)
        rows = coverage_study(d, bf, args.replicates, offsets=parse_floats(args.offsets), seed=args.seed, threads=threads, n_sim=args.nsim, alpha=args.alpha)
        out.table("coverage.csv", rows)
        if not args.quiet:
            print_table(rows)
        return EXIT_OK
    raise UsageError(f"unknown study {args.study!r}")


def cmd_bootstrap(args, out, info):
    if (args.fit is None) == (args.design is None):
        raise UsageError("give exactly one of --fit and --design")
    if args.fit is not None:
        f = load_fit(args.fit)
        info["fit"] = os.path.abspath(args.fit)
    else:
        d = _design(args)
        f = design_base_fit(d)
        info["design"] = args.design
        save_fit(out, f, prefix="base_fit/")
    info.update(seed=args.seed, replicates=args.replicates, smooth_truth=args.smooth_truth)
    res = bootstrap(f.model, f, args.replicates, seed=args.seed, threads=args.threads, hessian=not args.no_se, smooth_truth=args.smooth_truth)
    tab = res.table()
    out.table("bootstrap.csv", tab)
    edf_rows = []
    for name, v in res.edf.items():
        edf_rows.append(
            {
                "smooth": name,
                "edf_truth": res.edf_truth.get(name, float("nan")),
                "mean": float(np.mean(v)) if v.size else float("nan"),
                "sd": float(np.std(v, ddof=1)) if v.size > 1 else float("nan"),
                "min": float(np.min(v)) if v.size else float("nan"),
                "max": float(np.max(v)) if v.size else float("nan"),
                "rmse": res.rmse.get(name, float("nan")),
            }
        )
    out.table("bootstrap_smooths.csv", edf_rows, ["smooth", "edf_truth", "mean", "sd", "min", "max", "rmse"])
    out.table("bootstrap_status.csv", [{"requested": args.replicates, "converged": res.n_ok, "failures": res.failures, "seed": args.seed}])
    if args.save_replicates:
        rows = [{"replicate": k, **dict(zip(res.names, e))} for k, e in enumerate(res.estimates)]
        out.table("bootstrap_replicates.csv", rows, ["replicate"] + res.names)
    info["failures"] = res.failures
    if not args.quiet:
        print_table(tab, ["parameter", "truth", "mean", "bias", "mcse", "bootstrap_se", "mean_asymptotic_se"])
        print_table(edf_rows)
    return EXIT_OK


def cmd_compare(args, out, info):
    if len(args.fits) < 2:
        raise UsageError("compare needs at least two fit directories")
    fits = [load_fit(d) for d in args.fits]
    names = args.names.split(",") if args.names else [os.path.basename(os.path.normpath(d)) for d in args.fits]
    if len(names) != len(fits) or len(set(names)) != len(names):
        raise UsageError("--names must give one distinct name per fit")
    info["fits"] = [os.path.abspath(d) for d in args.fits]
    rows = aic(fits, names)
    out.table("aic.csv", rows, ["model", "n_params", "loglik", "aic", "delta"])
    order = sorted(range(len(fits)), key=lambda k: (fits[k].n_params, names[k]))
    tests = []
    for a, b in zip(order, order[1:]):
        if fits[b].n_params <= fits[a].n_params:
            continue
        t = lrt(fits[a], fits[b])
        tests.append({"null": names[a], "alternative": names[b], "statistic": t.statistic, "df": t.df, "p_value": t.p_value, "boundary_warning": t.boundary_warning})
    out.table("lrt.csv", tests, ["null", "alternative", "statistic", "df", "p_value", "boundary_warning"])
    if not args.quiet:
        print_table(rows)
        print()
        print_table(tests)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# list-valued flags whose value may start with "-" (e.g. --offsets -2,0,2)
_LIST_FLAGS = ("--offsets", "--grid", "--lambda8-grid", "--ratios", "--lambda8")


def _join_list_values(argv):
    out = []
    it = iter(argv)
    for a in it:
        if a in _LIST_FLAGS:
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def build_parser():
    p = _Parser(prog="galamm", description="Generalized additive latent and mixed models.")
    p.add_argument("--version", action="version", version=f"galamm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("--quiet", action="store_true", help="do not print tables")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("fit", help="fit a model to data")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--max-iter", type=int, default=500)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--standardize", default=None, help="comma list of dispersion groups; overrides the config")
    common(sp)

    sp = sub.add_parser("bands", help="confidence bands for a smooth term")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--smooth", required=True)
    sp.add_argument("--grid", default="100")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--nsim", type=int, default=100000)
    sp.add_argument("--latent", default=None)
    sp.add_argument("--item", default=None)
    sp.add_argument("--offsets", default=None, help="comma list of latent offsets in SD units")
    sp.add_argument("--sd", type=float, default=None, help="latent SD used for offsets (default: estimated)")
    common(sp)

    def study_flags(sp):
        sp.add_argument("--design", default=None, help="cognitive-like or ses-like")
        sp.add_argument("--subjects", type=int, default=None)
        sp.add_argument("--replicates", type=int, default=1)
        sp.add_argument("--threads", type=int, default=None, help="worker processes (default GALAMM_THREADS or 1)")
        sp.add_argument("--save-replicates", action="store_true")

    sp = sub.add_parser("simulate", help="generate data or run a simulation study")
    study_flags(sp)
    sp.add_argument("--study", choices=["none", "boundary", "power", "coverage"], default="none")
    sp.add_argument("--lambda8", type=float, default=0.0)
    sp.add_argument("--lambda8-grid", default="0,0.024,0.048,0.072,0.096,0.12")
    sp.add_argument("--replicates-null", type=int, default=None)
    sp.add_argument("--ratios", default="0,0.1,0.25,0.5")
    sp.add_argument("--offsets", default="-2,-1,0,1,2")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--nsim", type=int, default=10000)
    common(sp)

    sp = sub.add_parser("bootstrap", help="parametric bootstrap of a fit or a study design")
    sp.add_argument("--fit", default=None)
    study_flags(sp)
    sp.add_argument("--smooth-truth", choices=["estimate", "prior"], default="estimate")
    sp.add_argument("--no-se", action="store_true", help="skip Hessians in the refits")
    common(sp)

    sp = sub.add_parser("compare", help="AIC table and likelihood-ratio tests")
    sp.add_argument("--fits", nargs="+", required=True)
    sp.add_argument("--names", default=None)
    common(sp, seed=False)
    return p


COMMANDS = {"fit": cmd_fit, "bands": cmd_bands, "simulate": cmd_simulate, "bootstrap": cmd_bootstrap, "compare": cmd_compare}


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_join_list_values(argv))
    if getattr(args, "design", None) is None and args.command == "simulate":
        parser.error("simulate needs --design")
    if hasattr(args, "threads") and args.threads is None:
        args.threads = default_threads()
    out = Output(args.out)
    info = {"command": args.command, "argv": argv, "tool_version": __version__}
    t0 = time.time()
    code = EXIT_INPUT
    try:
        code = COMMANDS[args.command](args, out, info)
        info["status"] = "ok" if code == EXIT_OK else "not converged"
    except (UsageError, *INPUT_ERRORS) as exc:
        info["status"] = "error"
        info["error"] = f"{type(exc).__name__}: {exc}"
        print(f"galamm {args.command}: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except (PIRLSError, NotPositiveDefiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        info["status"] = "error"
        info["error"] = f"{type(exc).__name__}: {exc}"
        print(f"galamm {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NONCONVERGED
    except Exception as exc:  # still leave a manifest behind
        info["status"] = "error"
        info["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        out.manifest({**info, "exit_code": EXIT_INPUT, "wall_time": time.time() - t0})
        raise
    info["exit_code"] = code
    info["wall_time"] = round(time.time() - t0, 3)
    out.manifest(info)
    return code


if __name__ == "__main__":
    sys.exit(main())
