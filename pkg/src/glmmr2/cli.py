"""Command-line front end.

Subcommands
-----------
fit           full and intercept-only fits, LRT, R^2 (both denominators), Wald test
check-oracle  adaptive quadrature against the trapezoid oracle, per subject
simulate      write a simulated dataset, or run the added-predictor experiment

Exit codes
----------
0   success (``fit``: both models converged; ``check-oracle``: discrepancy below tolerance)
1   ``check-oracle`` discrepancy at or above tolerance
2   ``fit``: at least one model did not converge (the report is still written)
64  usage error (bad flags)
65  data error (unreadable table, missing column, outcome invalid for the family)
70  numerical failure during fitting
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import sys
import time

import numpy as np

from . import __version__
from ._backend import BACKEND
from .covariance import CovarianceKind
from .data import CsvSchema, load_long_csv
from .errors import DataError, DomainError, GlmmError, UnsupportedDimensionError
from .estimation import FitOptions, ModelSpec, fit_glmm, fit_null
from .family import CANONICAL_LINK, get_family, get_link
from .inference import lrt, r2_from_lrt, wald_test, DenominatorKind
from .likelihood import QuadratureSpec, marginal_loglik_subject, oracle_marginal_loglik_subject
from .simulate import GENERATOR, SimConfig, added_predictor_experiment, simulate_glmm

EX_OK, EX_DISCREPANCY, EX_NOT_CONVERGED = 0, 1, 2
EX_USAGE, EX_DATAERR, EX_SOFTWARE = 64, 65, 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _names(text):
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def _floats(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _add_model_flags(p, data_required=False):
    p.add_argument("--data", metavar="PATH", required=data_required)
    p.add_argument("--subject", metavar="COL")
    p.add_argument("--outcome", metavar="COL")
    p.add_argument("--fixed", metavar="COL[,COL...]", default="")
    p.add_argument("--weight", metavar="COL")
    p.add_argument("--random-intercept", action="store_true",
                   help="random intercept (default when no random slope is given)")
    p.add_argument("--random-slope", metavar="COL", action="append", default=[])
    p.add_argument("--family", choices=["bernoulli", "poisson"], default="bernoulli")
    p.add_argument("--link", choices=["logit", "log"])
    p.add_argument("--structure", choices=[k.value for k in CovarianceKind])
    p.add_argument("--quad-nodes", metavar="Q", type=int)


def build_parser():
    parser = _Parser(prog="glmmr2", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"glmmr2 {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit full and null GLMMs and report the LRT R^2")
    _add_model_flags(fit)
    fit.add_argument("--example", action="store_true", help="use the bundled blood-pressure dataset")
    fit.add_argument("--freeze-null-variance", action="store_true",
                     help="hold the null model's variance components at the full-model estimates")
    fit.add_argument("--max-iterations", type=int, default=500)
    fit.add_argument("--seed", type=int, help="accepted for symmetry; fitting is deterministic")
    fit.add_argument("--out", metavar="PATH", help="write the JSON report here ('-' for stdout)")

    chk = sub.add_parser("check-oracle", help="compare quadrature with the trapezoid oracle")
    _add_model_flags(chk)
    chk.add_argument("--seed", type=int, default=1)
    chk.add_argument("--units", type=int, default=20)
    chk.add_argument("--per-unit", type=int, default=5)
    chk.add_argument("--beta", default="-0.5,1.0")
    chk.add_argument("--sigma", type=float, default=1.0, help="random-intercept standard deviation")
    chk.add_argument("--tolerance", type=float, default=1e-6)
    chk.add_argument("--out", metavar="PATH")

    sim = sub.add_parser("simulate", help="simulate data or run the added-predictor experiment")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--units", type=int, default=100)
    sim.add_argument("--per-unit", type=int, default=4)
    sim.add_argument("--fixed", metavar="COL[,COL...]", default="x1")
    sim.add_argument("--beta", default="-0.5,0.8", help="intercept first")
    sim.add_argument("--sigma", default="1.0", help="random-effect standard deviation(s)")
    sim.add_argument("--random-intercept", action="store_true")
    sim.add_argument("--random-slope", metavar="COL", action="append", default=[])
    sim.add_argument("--family", choices=["bernoulli", "poisson"], default="bernoulli")
    sim.add_argument("--link", choices=["logit", "log"])
    sim.add_argument("--structure", choices=[k.value for k in CovarianceKind])
    sim.add_argument("--quad-nodes", metavar="Q", type=int)
    sim.add_argument("--experiment", choices=["added-predictor"])
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--out", metavar="PATH")
    return parser


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _model_spec(args, fixed):
    family = get_family(args.family)
    link = get_link(args.link) if args.link else CANONICAL_LINK[family.kind]
    slopes = tuple(args.random_slope)
    intercept = args.random_intercept or not slopes
    try:
        return ModelSpec(family, link, fixed, intercept, slopes, args.structure)
    except (DomainError, GlmmError) as exc:
        raise UsageError(str(exc)) from None


def _finite(obj, path="", flagged=None):
    """Replace non-finite floats by None and record where."""
    if isinstance(obj, dict):
        return {k: _finite(v, f"{path}.{k}" if path else k, flagged) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v, f"{path}[{i}]", flagged) for i, v in enumerate(obj)]
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            flagged.append(path)
            return None
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fit_summary(fit, seconds):
    spec = fit.spec
    out = {
        "fixed_effects": list(spec.x_names),
        "random_effects": list(spec.z_names),
        "structure": spec.structure.value,
        "beta": dict(zip(spec.x_names, fit.beta_hat.tolist())),
        "alpha": fit.alpha_hat.tolist(),
        "sigma": fit.sigma_hat.tolist(),
        "loglik": fit.loglik,
        "converged": fit.converged,
        "boundary": fit.boundary,
        "variance_fixed": fit.variance_fixed,
        "iterations": fit.iterations,
        "gradient_norm": fit.gradient_norm,
        "seconds": seconds,
    }
    try:
        out["standard_errors"] = dict(zip(spec.x_names, fit.standard_errors().tolist()))
    except GlmmError:
        out["standard_errors"] = None
    return out


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ----------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------


def cmd_fit(args) -> int:
    if args.example:
        from .example import EXAMPLE_SCHEMA, example_path

        raw = example_path().read_bytes()
        source = "bundled:example_bp.csv"
        schema = EXAMPLE_SCHEMA
        fixed = schema.fixed
    else:
        if not (args.data and args.subject and args.outcome):
            raise UsageError("--data, --subject and --outcome are required (or use --example)")
        fixed = _names(args.fixed)
        slopes = tuple(args.random_slope)
        schema = CsvSchema(args.subject, args.outcome, fixed, slopes,
                           args.random_intercept or not slopes, args.weight)
        try:
            with open(args.data, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {args.data}: {exc}") from None
        source = args.data
    spec = _model_spec(args, fixed)
    dataset = load_long_csv(io.BytesIO(raw), schema)
    n_columns = len(raw.splitlines()[0].decode("utf-8-sig").split(",")) if raw else 0

    quad = QuadratureSpec(args.quad_nodes)
    options = FitOptions(max_iterations=args.max_iterations)
    t0 = time.perf_counter()
    full = fit_glmm(dataset, spec, quad, options)
    t1 = time.perf_counter()
    null_options = options
    if args.freeze_null_variance:
        null_options = FitOptions(max_iterations=args.max_iterations,
                                  fixed_alpha=tuple(full.alpha_hat))
    null = fit_null(dataset, spec, quad, null_options)
    t2 = time.perf_counter()
    test = lrt(full, null)
    r2_n = r2_from_lrt(test.statistic, dataset.total_observations(), DenominatorKind.OBSERVATIONS)
    r2_N = r2_from_lrt(test.statistic, dataset.N, DenominatorKind.UNITS)
    try:
        wald = wald_test(full) if spec.q > 1 else None
    except GlmmError:
        wald = None

    report = {
        "tool": {"name": "glmmr2", "version": __version__, "backend": BACKEND},
        "input": {
            "source": source,
            "rows": dataset.total_observations(),
            "columns": n_columns,
            "units": dataset.N,
            "sha256": hashlib.sha256(raw).hexdigest(),
        },
        "model": {
            "family": spec.family.kind.value,
            "link": spec.link.value,
            "structure": spec.structure.value,
        },
        "quadrature": {"nodes_per_dim": full.quad.nodes_per_dim, "adaptive": full.quad.adaptive},
        "options": {"freeze_null_variance": bool(args.freeze_null_variance),
                    "max_iterations": args.max_iterations},
        "models": {"full": _fit_summary(full, t1 - t0), "null": _fit_summary(null, t2 - t1)},
        "lrt": {
            "statistic": test.statistic,
            "raw_statistic": test.raw_statistic,
            "df": test.df,
            "p_value": test.p_value,
            "clamped": test.clamped,
        },
        "r2": {
            "headline": "observations",
            "observations": {"value": r2_n.value, "denominator": r2_n.denominator},
            "units": {"value": r2_N.value, "denominator": r2_N.denominator},
        },
        "wald": None if wald is None else {
            "statistic": wald.statistic, "df": wald.df, "p_value": wald.p_value,
        },
        "timings": {"full_fit_s": t1 - t0, "null_fit_s": t2 - t1},
    }
    flagged = []
    report = _finite(report, flagged=flagged)
    report["nonfinite_fields"] = flagged
    text = json.dumps(report, indent=2) + "\n"

    summary = _human_summary(report)
    if args.out == "-":
        sys.stdout.write(text)
        sys.stderr.write(summary)
    else:
        if args.out:
            _write(text, args.out)
        sys.stdout.write(summary)
    return EX_OK if (full.converged and null.converged) else EX_NOT_CONVERGED


def _human_summary(report):
    lines = []
    full, null = report["models"]["full"], report["models"]["null"]
    width = max(len(k) for k in full["beta"])
    lines.append(f"glmmr2 {report['tool']['version']} ({report['tool']['backend']} kernels)")
    lines.append(
        f"data: {report['input']['source']}  N={report['input']['units']}  n={report['input']['rows']}"
    )
    m = report["model"]
    q = report["quadrature"]
    lines.append(f"model: {m['family']}/{m['link']}, {m['structure']} covariance, "
                 f"AGQ nodes={q['nodes_per_dim']}")
    lines.append("")
    lines.append(f"{'term':<{width}}  {'estimate':>12}  {'std.err':>10}")
    se = full["standard_errors"] or {}
    for k, v in full["beta"].items():
        s = se.get(k)
        lines.append(f"{k:<{width}}  {v:>12.6f}  {'' if s is None else format(s, '10.6f'):>10}")
    lines.append("")
    for name, fit in (("full", full), ("null", null)):
        lines.append(f"{name:<5} loglik={fit['loglik']:.6f}  converged={fit['converged']}  "
                     f"sigma={fit['sigma']}")
    t = report["lrt"]
    lines.append(f"LRT = {t['statistic']:.4f} on {t['df']} df, p = {t['p_value']:.4g}")
    r = report["r2"]
    lines.append(f"R2_L (n={r['observations']['denominator']}) = {r['observations']['value']:.6f}")
    lines.append(f"R2_L (N={r['units']['denominator']}) = {r['units']['value']:.6f}")
    if report["wald"]:
        w = report["wald"]
        lines.append(f"Wald = {w['statistic']:.4f} on {w['df']} df, p = {w['p_value']:.4g}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# check-oracle
# ----------------------------------------------------------------------


def cmd_check_oracle(args) -> int:
    quad = QuadratureSpec(args.quad_nodes or 25)
    if args.data:
        if not (args.subject and args.outcome):
            raise UsageError("--subject and --outcome are required with --data")
        fixed = _names(args.fixed)
        slopes = tuple(args.random_slope)
        if slopes:
            raise UsageError("the trapezoid oracle supports a single random intercept only")
        spec = _model_spec(args, fixed)
        schema = CsvSchema(args.subject, args.outcome, fixed, (), True, args.weight)
        try:
            with open(args.data, "rb") as fh:
                dataset = load_long_csv(fh, schema)
        except OSError as exc:
            raise DataError(f"cannot read {args.data}: {exc}") from None
        fit = fit_glmm(dataset, spec)
        beta, sigma = fit.beta_hat, fit.sigma_hat
    else:
        if args.random_slope:
            raise UsageError("the trapezoid oracle supports a single random intercept only")
        beta = _floats(args.beta)
        fixed = tuple(f"x{k}" for k in range(1, len(beta)))
        spec = _model_spec(args, fixed)
        sigma = np.array([[args.sigma ** 2]])
        dataset = simulate_glmm(SimConfig(spec, beta, sigma, args.units, args.per_unit, seed=args.seed))
    if spec.m != 1:
        raise UsageError("the trapezoid oracle supports m = 1 only")
    worst = 0.0
    rows = []
    for i, block in enumerate(dataset.blocks):
        a = marginal_loglik_subject(block, beta, sigma, spec.family, spec.link, quad)
        o = oracle_marginal_loglik_subject(block, beta, sigma, spec.family, spec.link)
        worst = max(worst, abs(a - o))
        rows.append((block.subject_id, a, o, abs(a - o)))
    if args.out:
        buf = io.StringIO()
        buf.write("subject,agq,oracle,abs_diff\n")
        for sid, a, o, d in rows:
            buf.write(f"{sid},{a!r},{o!r},{d!r}\n")
        _write(buf.getvalue(), args.out)
    ok = worst < args.tolerance
    print(f"subjects={len(rows)} nodes={quad.nodes_per_dim} max_abs_discrepancy={worst:.3e} "
          f"tolerance={args.tolerance:g} {'PASS' if ok else 'FAIL'}")
    return EX_OK if ok else EX_DISCREPANCY


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------

EXPERIMENT_COLUMNS = (
    "replicate", "r2_base", "r2_augmented", "delta_r2", "lrt_base", "lrt_augmented",
    "loglik_null", "loglik_base", "loglik_augmented", "converged", "decreased", "error",
)


def format_experiment(report) -> str:
    buf = io.StringIO()
    buf.write(",".join(EXPERIMENT_COLUMNS) + "\n")
    for r in report.rows:
        vals = [r.replicate, r.r2_base, r.r2_augmented, r.delta, r.lrt_base, r.lrt_augmented,
                r.loglik_null, r.loglik_base, r.loglik_augmented, int(r.converged),
                int(r.decreased), r.error.replace(",", ";")]
        buf.write(",".join("" if isinstance(v, float) and math.isnan(v) else
                           (repr(v) if isinstance(v, float) else str(v)) for v in vals) + "\n")
    buf.write("# summary\n")
    for k, v in report.summary().items():
        buf.write(f"# {k}: {v}\n")
    return buf.getvalue()


def cmd_simulate(args) -> int:
    fixed = _names(args.fixed)
    spec = _model_spec(args, fixed)
    beta = _floats(args.beta)
    sds = _floats(args.sigma)
    if len(sds) == 1 and spec.m > 1:
        sds = sds * spec.m
    if len(beta) != spec.q or len(sds) != spec.m or min(sds) <= 0:
        raise UsageError(f"need {spec.q} beta values and {spec.m} positive standard deviations")
    if args.units < 1 or args.per_unit < 1 or args.replicates < 1:
        raise UsageError("--units, --per-unit and --replicates must be positive")
    try:
        config = SimConfig(spec, beta, np.diag(np.square(sds)), args.units, args.per_unit,
                           seed=args.seed)
    except GlmmError as exc:
        raise UsageError(str(exc)) from None
    if args.experiment == "added-predictor":
        report = added_predictor_experiment(config, args.replicates, args.seed,
                                            quad=QuadratureSpec(args.quad_nodes))
        _write(format_experiment(report), args.out)
        return EX_OK
    buf = io.StringIO()
    simulate_glmm(config).to_csv(buf)
    _write(buf.getvalue(), args.out)
    return EX_OK


COMMANDS = {"fit": cmd_fit, "check-oracle": cmd_check_oracle, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EX_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"glmmr2: usage error: {exc}", file=sys.stderr)
        return EX_USAGE
    except UnsupportedDimensionError as exc:
        print(f"glmmr2: usage error: {exc}", file=sys.stderr)
        return EX_USAGE
    except DataError as exc:
        print(f"glmmr2: data error: {exc}", file=sys.stderr)
        return EX_DATAERR
    except GlmmError as exc:
        print(f"glmmr2: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EX_SOFTWARE


if __name__ == "__main__":
    sys.exit(main())
