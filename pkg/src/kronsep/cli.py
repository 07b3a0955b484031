"""Command-line front end: ``kronsep {fit-null,fit-alt,test,simulate,info}``.

Every command writes one JSON report to standard output (or ``--out``).
Errors are written to standard error as a JSON object. Exit status is 0 on
success, 1 for usage or data errors and 2 when a model fit does not converge.
"""

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from .data import CsvOptions, load_csv
from .errors import (
    AllStartsInadmissible,
    FitNotConverged,
    KronsepError,
    NonConvergence,
    StudyAborted,
)
from .fit_alt import fit_alt
from .fit_null import FitOptions, fit_null
from .lrt import ADJUSTMENTS, dof_lear, k1_adjust, k2_adjust, lrt_from_fits, NEGATIVE_K1_WARNING
from .simulate import IMBALANCE_POLICIES, SimConfig, run_study

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGENCE = 0, 1, 2
SCENARIO_ALIASES = {"null": "null_mean", "null_mean": "null_mean", "two_group": "two_group", "snr": "two_group"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- JSON -------------------------------------------------------------------

def jsonable(obj):
    """Convert numpy values and non-finite floats into plain JSON types (non-finite -> null)."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    return obj


def dumps(report) -> str:
    # float repr is the shortest decimal that round-trips, so values survive text exactly
    return json.dumps(jsonable(report), indent=2, allow_nan=False) + "\n"


def _merge_warnings(*lists):
    out = []
    for lst in lists:
        for w in lst or ():
            if w not in out:
                out.append(w)
    return out


# -- inputs -----------------------------------------------------------------

def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load(args):
    covariates = None if args.covariates is None else [c for c in args.covariates.split(",") if c]
    opts = CsvOptions(
        subject=args.subject_col, y=args.y_col, time=args.time_col, loc=args.loc_col,
        covariates=covariates, intercept=args.intercept,
    )
    try:
        dataset = load_csv(args.data, opts)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {args.data}") from None
    digest = dict(dataset.digest())
    digest["path"] = args.data
    digest["sha256"] = _file_digest(args.data)
    digest["covariates"] = list(dataset.covariate_names)
    digest["intercept"] = dataset.intercept
    return dataset, digest


def _fit_options(args) -> FitOptions:
    try:
        return FitOptions(max_iter=args.max_iter, rel_tol=args.rel_tol, grad_tol=args.grad_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _adjustments(args):
    return ADJUSTMENTS if args.adjustment == "all" else (args.adjustment,)


def _base_report(args, argv):
    return {
        "command": {"name": args.command, "argv": list(argv)},
        "version": __version__,
        "seed": getattr(args, "seed", None),
    }


# -- commands ---------------------------------------------------------------

def cmd_fit_null(args, argv):
    dataset, digest = _load(args)
    fit = fit_null(dataset, _fit_options(args))
    report = _base_report(args, argv)
    report["input"] = digest
    report["fits"] = {"null": fit.summary()}
    report["warnings"] = _merge_warnings(dataset.warnings, fit.warnings)
    return report


def cmd_fit_alt(args, argv):
    dataset, digest = _load(args)
    fit = fit_alt(dataset, _fit_options(args))
    report = _base_report(args, argv)
    report["input"] = digest
    report["fits"] = {"alt": fit.summary()}
    report["warnings"] = _merge_warnings(dataset.warnings, fit.warnings)
    return report


def cmd_test(args, argv):
    dataset, digest = _load(args)
    options = _fit_options(args)
    try:
        null_fit = fit_null(dataset, options)
    except NonConvergence as exc:
        raise FitNotConverged("null (separable)", f"null (separable) fit did not converge: {exc}") from exc
    try:
        alt_fit = fit_alt(dataset, options)
    except NonConvergence as exc:
        raise FitNotConverged("alternative (unstructured)", str(exc)) from exc
    res = lrt_from_fits(null_fit, alt_fit, dataset.N, dataset.max_ts, args.alpha, _adjustments(args))
    report = _base_report(args, argv)
    report["input"] = digest
    report["fits"] = {"null": null_fit.summary(), "alt": alt_fit.summary()}
    test = res.summary()
    test["adjustments"] = list(_adjustments(args))
    test["warnings"] = list(res.warnings)
    report["test"] = test
    report["warnings"] = _merge_warnings(dataset.warnings, null_fit.warnings, alt_fit.warnings, res.warnings)
    return report


def cmd_info(args, argv):
    report = _base_report(args, argv)
    warnings = []
    if args.data is not None:
        dataset, digest = _load(args)
        report["input"] = digest
        n_subj, max_ts = dataset.N, dataset.max_ts
        warnings.extend(dataset.warnings)
    else:
        if args.n is None or args.max_ts is None:
            raise UsageError("info needs --data, or both --n and --max-ts")
        n_subj, max_ts = args.n, args.max_ts
    if n_subj < 1 or max_ts < 1:
        raise UsageError("--n and --max-ts must be positive")
    block = {"N": n_subj, "max_ts": max_ts, "nu": None, "k1": None, "k2": None}
    try:
        block["nu"] = dof_lear(max_ts)
    except KronsepError as exc:
        warnings.append(str(exc))
    try:
        block["k2"] = k2_adjust(n_subj, max_ts)
        block["k1"] = k1_adjust(n_subj, max_ts)
    except KronsepError as exc:
        warnings.append(str(exc))
    if block["k1"] is not None and block["k1"] <= 0:
        warnings.append(NEGATIVE_K1_WARNING.format(k1=block["k1"], N=n_subj, M=max_ts))
    report["info"] = block
    report["warnings"] = warnings
    return report


def _read_config(path) -> dict:
    """Study settings from a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config file {path}, line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _sim_config(args) -> SimConfig:
    settings = _read_config(args.config) if args.config else {}
    known = {f.name for f in fields(SimConfig)}
    unknown = sorted(set(settings) - known)
    if unknown:
        raise UsageError(f"unknown simulation setting(s): {', '.join(unknown)}")
    flags = {
        "N": args.n, "t_max": args.tmax, "s_max": args.smax, "reps": args.reps, "seed": args.seed,
        "alpha": args.alpha, "imbalance": args.imbalance,
        "scenario": SCENARIO_ALIASES[args.scenario] if args.scenario else None,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    if "scenario" in settings:
        settings["scenario"] = SCENARIO_ALIASES.get(settings["scenario"], settings["scenario"])
    if "beta" in settings and settings["beta"] is not None:
        settings["beta"] = tuple(settings["beta"])
    if "N" not in settings:
        raise UsageError("simulate needs --n (or N in the config file)")
    try:
        if args.preset == "table1":
            n_subj = settings.pop("N")
            return SimConfig.table1(n_subj, **settings)
        return SimConfig(**settings)
    except (KronsepError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation settings: {exc}") from None


def cmd_simulate(args, argv):
    config = _sim_config(args)
    report = _base_report(args, argv)
    report["seed"] = config.seed
    result = run_study(config, _fit_options(args), keep_log=args.keep_log)
    report["simulation"] = result.summary()
    report["warnings"] = []
    return report


COMMANDS = {
    "fit-null": cmd_fit_null,
    "fit-alt": cmd_fit_alt,
    "test": cmd_test,
    "simulate": cmd_simulate,
    "info": cmd_info,
}


# -- parser -----------------------------------------------------------------

def _add_fit_flags(p):
    p.add_argument("--max-iter", type=int, default=FitOptions.max_iter)
    p.add_argument("--rel-tol", type=float, default=FitOptions.rel_tol)
    p.add_argument("--grad-tol", type=float, default=FitOptions.grad_tol)


def _add_data_flags(p, required=True):
    p.add_argument("--data", required=required, help="long-format CSV, one row per observation")
    p.add_argument("--subject-col", default="subject")
    p.add_argument("--y-col", default="y")
    p.add_argument("--time-col", default="time")
    p.add_argument("--loc-col", default="loc")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all remaining columns)")
    p.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kronsep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kronsep {__version__}")
    parser.add_argument("--out", help="write the JSON report here instead of standard output")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("fit-null", "fit the separable Kronecker LEAR model"),
                           ("fit-alt", "fit the unstructured alternative")):
        p = sub.add_parser(name, help=helptext)
        _add_data_flags(p)
        _add_fit_flags(p)

    p = sub.add_parser("test", help="likelihood ratio test of separability")
    _add_data_flags(p)
    _add_fit_flags(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--adjustment", choices=("none", "k1", "k2", "all"), default="all")

    p = sub.add_parser("simulate", help="Monte Carlo test-size study")
    p.add_argument("--preset", choices=("table1",))
    p.add_argument("--config", help="JSON object or key = value file of SimConfig fields")
    p.add_argument("--n", type=int)
    p.add_argument("--tmax", type=int)
    p.add_argument("--smax", type=int)
    p.add_argument("--scenario", choices=sorted(SCENARIO_ALIASES))
    p.add_argument("--imbalance", choices=IMBALANCE_POLICIES)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--keep-log", action="store_true", help="include the per-replicate log")
    _add_fit_flags(p)

    p = sub.add_parser("info", help="degrees of freedom and k adjustments without fitting")
    _add_data_flags(p, required=False)
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--max-ts", type=int, help="largest number of observations per subject")

    # --out is accepted after the subcommand as well
    for choice in sub.choices.values():
        choice.add_argument("--out", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return parser


def _error(kind, exc, code):
    payload = {"error": {"type": type(exc).__name__, "kind": kind, "message": str(exc)}}
    partial = getattr(exc, "partial", None)
    if partial is not None:
        payload["error"]["partial"] = partial.summary()
    sys.stderr.write(dumps(payload))
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    start = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        report = COMMANDS[args.command](args, argv)
    except UsageError as exc:
        return _error("usage", exc, EXIT_USAGE)
    except (NonConvergence, FitNotConverged, StudyAborted, AllStartsInadmissible) as exc:
        return _error("nonconvergence", exc, EXIT_NONCONVERGENCE)
    except KronsepError as exc:
        return _error("data", exc, EXIT_USAGE)
    except OSError as exc:
        return _error("io", exc, EXIT_USAGE)
    report["runtime"] = time.perf_counter() - start
    text = dumps(report)
    out = getattr(args, "out", None)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
