"""Command-line interface.

Subcommands: ``analyze-ate``, ``analyze-iv``, ``match``, ``simulate``,
``balance``. Every file-producing run also emits ``<out>.manifest.json``
recording the resolved options, input digests, tool version, and seed, which
is sufficient to re-run the command bit-identically (the manifest's own
timestamp is the only field that varies). Reports written to ``--out`` never
contain timestamps, so identical invocations produce identical bytes.

Exit codes: 0 success, 2 malformed input, 3 numerical or feasibility
failure. A weak instrument is a finding, not a failure: ``analyze-iv``
reports it with ``weak_iv_flag`` and exits 0.
"""
import argparse
import datetime
import hashlib
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .ate import DesignMatrixSpec, analyze, fpw_estimate
from .design import (balance_table, load_dataset, read_table, save_dataset,
                     validate_design, write_balance_csv)
from .errors import DataError, DesignError, NumericalError, WeakInstrumentError
from .iv import (bc_wald, classical_wald, effect_ratio_confidence_set,
                 grid_agrees)
from .matching import MatchSpec, build_matched_dataset, full_match_dp
from .probabilities import (AssignmentProbs, check_set_sums, post_match_probs,
                            regularize_probs, uniform_probs)
from .propensity import PropensityModelSpec, clamp_scores, fit_scores
from .simulate import (ScenarioConfig, per_rep_csv, run_study, summarize)

_Q_KINDS = {"unit": "unit", "weights": "intercept_weights",
            "covmeans": "intercept_covmeans"}


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest(args, inputs, with_timestamp=True):
    options = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func", "config") and v is not None}
    manifest = {
        "command": args.command,
        "options": options,
        "inputs": {path: _sha256(path) for path in inputs},
        "version": __version__,
        "seed": getattr(args, "seed", None),
    }
    if with_timestamp:
        manifest["timestamp"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
    return manifest


def _emit_report(args, report, inputs):
    """Write (or print) a JSON report; manifest goes to a sibling file."""
    if args.out:
        _atomic_write(args.out, json.dumps(report, indent=2,
                                           allow_nan=False) + "\n")
        _atomic_write(args.out + ".manifest.json",
                      json.dumps(_manifest(args, inputs), indent=2) + "\n")
    else:
        report = dict(report)
        report["manifest"] = _manifest(args, inputs, with_timestamp=False)
        print(json.dumps(report, indent=2, allow_nan=False))


def _json_number(x):
    return None if x is None or not math.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# shared input handling
# ---------------------------------------------------------------------------

def _learner_spec(args):
    return PropensityModelSpec(
        learner=args.learner or "logistic",
        gbm_rounds=args.gbm_rounds, gbm_depth=args.gbm_depth,
        gbm_eta=args.gbm_eta, ridge=args.ridge, clamp_rho=args.clamp_rho)


def _resolve_scores(ds, args):
    """Propensity scores: the e_hat column, else a freshly fitted learner."""
    if args.learner in (None, "external") and ds.e_hat is not None:
        return ds.e_hat
    if args.learner == "external":
        raise DataError("--learner external requires an e_hat column")
    if args.learner is None and ds.x.shape[1] == 0:
        raise DataError("no e_hat column and no covariates to fit a learner")
    return fit_scores(ds.x, ds.z, _learner_spec(args))


def _resolve_probs(ds, args):
    """Assignment probabilities per --prob-source (with optional --gamma)."""
    source = args.prob_source
    if source == "uniform":
        probs = uniform_probs(ds)
    elif source == "oracle-file":
        if ds.p_hat is None:
            raise DataError("--prob-source oracle-file requires a p_hat column")
        probs = AssignmentProbs(p=ds.p_hat, source="oracle")
        check_set_sums(probs, ds)
    else:  # plugin
        probs = post_match_probs(ds, _resolve_scores(ds, args), source="plugin")
    if args.gamma is not None:
        probs = regularize_probs(probs, ds, args.gamma)
    return probs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_analyze_ate(args):
    ds = load_dataset(args.input, schema=None)
    q_spec = DesignMatrixSpec(_Q_KINDS[args.q])
    results = []
    for estimator in args.estimator:
        if estimator == "dim":
            res = analyze(ds, probs=None, q_spec=q_spec, alpha=args.alpha)
        elif estimator == "fpw":
            e_hat = clamp_scores(_resolve_scores(ds, args), args.clamp_rho)
            res = fpw_estimate(ds.z, ds.y, e_hat, alpha=args.alpha)
        else:  # ippw
            probs = _resolve_probs(ds, args)
            tag = "ippw_oracle" if args.prob_source == "oracle-file" else "ippw"
            res = analyze(ds, probs=probs, q_spec=q_spec, alpha=args.alpha,
                          estimator_tag=tag)
        results.append(res.to_dict())
    report = {"schema": "riim-report/v1", "command": "analyze-ate",
              "I": ds.I, "N": ds.N, "results": results}
    _emit_report(args, report, [args.input])
    return 0


def cmd_analyze_iv(args):
    ds = load_dataset(args.input, schema=None)
    if ds.d is None:
        raise DataError("missing column 'd': IV analysis needs the dose")
    results = []
    weak = False
    grid_ok = None
    for estimator, probs in (("wald", uniform_probs(ds)),
                             ("bc_wald", _resolve_probs(ds, args))):
        res = effect_ratio_confidence_set(ds, probs, alpha=args.alpha,
                                          estimator_tag=estimator)
        try:
            point = classical_wald(ds) if estimator == "wald" \
                else bc_wald(ds, probs)
        except WeakInstrumentError:
            point = None
        entry = res.to_dict()
        entry["point_estimate"] = _json_number(point)
        cs = entry["confidence_set"]
        cs["endpoints"] = [_json_number(v) for v in cs["endpoints"]]
        weak = weak or res.weak_iv_flag or point is None
        if args.grid_range is not None:
            lo, hi = args.grid_range
            ok = grid_agrees(res, ds, probs, args.alpha, (lo, hi))
            grid_ok = ok if grid_ok is None else (grid_ok and ok)
        results.append(entry)
    report = {"schema": "riim-report/v1", "command": "analyze-iv",
              "I": ds.I, "N": ds.N, "results": results,
              "weak_iv_flag": weak}
    if args.grid_range is not None:
        report["grid_agrees"] = grid_ok
    _emit_report(args, report, [args.input])
    return 0


def cmd_match(args):
    table = read_table(args.input, require_set_id=False)
    if "e_hat" in table and args.learner in (None, "external"):
        e_hat = table["e_hat"]
    elif args.learner == "external":
        raise DataError("--learner external requires an e_hat column")
    else:
        spec = _learner_spec(args)
        if args.learner is None:
            spec = PropensityModelSpec(learner="logistic")
        e_hat = fit_scores(table["x"], table["z"], spec)
    match_spec = MatchSpec(caliper=args.caliper,
                           max_set_size=args.max_set_size)
    result = full_match_dp(e_hat, table["z"], match_spec)
    ds, retained = build_matched_dataset(
        result, table["z"], table["y"], table["x"],
        d=table.get("d"), e_hat=e_hat)
    save_dataset(ds, args.out)
    dropped_path = os.path.join(os.path.dirname(os.path.abspath(args.out)),
                                "dropped.csv")
    lines = ["row,z,e_hat"]
    for u in result.dropped:
        lines.append(f"{int(u) + 1},{int(table['z'][u])},{e_hat[u]:.6g}")
    _atomic_write(dropped_path, "\n".join(lines) + "\n")
    _atomic_write(args.out + ".manifest.json",
                  json.dumps(_manifest(args, [args.input]), indent=2) + "\n")
    print(f"matched {ds.N} of {len(table['z'])} units into {ds.I} sets "
          f"(cost {result.cost:.6g}, dropped {result.n_dropped})")
    return 0


def cmd_simulate(args):
    estimators = tuple(args.estimators.split(",")) if args.estimators else None
    cfg = ScenarioConfig(
        study=args.study, model=args.model, n_units=args.n_units,
        reps=args.reps, seed=args.seed,
        caliper_on=(args.caliper == "on"),
        balance_threshold=args.balance_threshold,
        max_set_size=args.max_set_size, alpha=args.alpha,
        gamma=args.gamma if args.gamma is not None else 0.1,
        clamp_rho=args.clamp_rho, estimators=estimators,
        learner=PropensityModelSpec(
            learner=args.learner or "gbm", gbm_rounds=args.gbm_rounds,
            gbm_depth=args.gbm_depth, gbm_eta=args.gbm_eta,
            ridge=args.ridge, clamp_rho=args.clamp_rho),
        workers=args.workers)
    report = run_study(cfg)
    csv_text, pretty = summarize(report)
    _atomic_write(args.out, csv_text)
    _atomic_write(args.out + ".manifest.json",
                  json.dumps(_manifest(args, []), indent=2) + "\n")
    if args.per_rep:
        _atomic_write(args.per_rep, per_rep_csv(report))
    print(pretty, end="")
    return 0


def cmd_balance(args):
    ds = load_dataset(args.input, schema=None)
    rows = balance_table(ds)
    for violation in validate_design(ds):
        print(f"warning: {violation}", file=sys.stderr)
    if args.out:
        write_balance_csv(rows, args.out)
        _atomic_write(args.out + ".manifest.json",
                      json.dumps(_manifest(args, [args.input]), indent=2) + "\n")
    else:
        print("covariate,smd_pre,smd_post,degenerate")
        for r in rows:
            print(f"{r.covariate},{r.smd_pre:.6g},{r.smd_post:.6g},"
                  f"{str(r.degenerate).lower()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser, input_required=True):
    parser.add_argument("--input", required=input_required,
                        help="input CSV path")
    parser.add_argument("--out", help="output path (default: stdout)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=0.05)
    parser.add_argument("--gamma", type=float, default=None,
                        help="probability regularization threshold; "
                             "applied only when given")
    parser.add_argument("--clamp-rho", type=float, default=0.1, dest="clamp_rho")
    parser.add_argument("--learner", choices=["logistic", "gbm", "external"],
                        default=None)
    parser.add_argument("--gbm-rounds", type=int, default=100, dest="gbm_rounds")
    parser.add_argument("--gbm-depth", type=int, default=2, dest="gbm_depth")
    parser.add_argument("--gbm-eta", type=float, default=0.1, dest="gbm_eta")
    parser.add_argument("--ridge", type=float, default=0.0)


def _grid_range(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            "grid range must look like 'lo,hi'") from None
    return lo, hi


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ippw",
        description="Randomization inference for inexactly matched studies")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze-ate", help="average treatment effect analysis")
    _add_common(p)
    p.add_argument("--estimator", action="append",
                   choices=["dim", "ippw", "fpw"],
                   help="repeatable; default ippw")
    p.add_argument("--prob-source", choices=["uniform", "plugin", "oracle-file"],
                   default="plugin", dest="prob_source")
    p.add_argument("--q", choices=["unit", "weights", "covmeans"],
                   default="unit")
    p.set_defaults(func=cmd_analyze_ate)

    p = sub.add_parser("analyze-iv", help="effect ratio analysis")
    _add_common(p)
    p.add_argument("--prob-source", choices=["uniform", "plugin", "oracle-file"],
                   default="plugin", dest="prob_source")
    p.add_argument("--grid-range", type=_grid_range, default=None,
                   dest="grid_range",
                   help="cross-validate the confidence set on 'lo,hi'")
    p.set_defaults(func=cmd_analyze_iv)

    p = sub.add_parser("match", help="full matching on a propensity score")
    _add_common(p)
    p.add_argument("--caliper", type=float, default=None)
    p.add_argument("--max-set-size", type=int, default=8, dest="max_set_size")
    p.set_defaults(func=cmd_match)
    p.set_defaults(out_required=True)

    p = sub.add_parser("simulate", help="Monte-Carlo study")
    p.add_argument("--config", default=None,
                   help="key=value file; explicit flags take precedence")
    p.add_argument("--study", choices=["ate", "iv"], default="ate")
    p.add_argument("--model", type=int, choices=[1, 2], default=1)
    p.add_argument("--n-units", type=int, default=400, dest="n_units")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--caliper", choices=["on", "off"], default="off")
    p.add_argument("--balance-threshold", type=float, default=0.2,
                   dest="balance_threshold")
    p.add_argument("--max-set-size", type=int, default=8, dest="max_set_size")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--clamp-rho", type=float, default=0.1, dest="clamp_rho")
    p.add_argument("--estimators", default=None,
                   help="comma-separated subset of the study's estimators")
    p.add_argument("--learner", choices=["logistic", "gbm"], default=None)
    p.add_argument("--gbm-rounds", type=int, default=100, dest="gbm_rounds")
    p.add_argument("--gbm-depth", type=int, default=2, dest="gbm_depth")
    p.add_argument("--gbm-eta", type=float, default=0.1, dest="gbm_eta")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="summary CSV path")
    p.add_argument("--per-rep", default=None, dest="per_rep",
                   help="optional per-replication CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("balance", help="covariate balance table")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_balance)
    return parser


def _apply_config_file(argv, parser):
    """Load --config key=value pairs as subcommand defaults."""
    if "--config" not in argv:
        return argv
    path = argv[argv.index("--config") + 1]
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"config line is not key=value: {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    sub_actions = [a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)]
    sim = sub_actions[0].choices["simulate"]
    known = {a.dest: a for a in sim._actions}
    defaults = {}
    for key, value in values.items():
        if key not in known:
            raise DataError(f"unknown config key {key!r}")
        action = known[key]
        defaults[key] = action.type(value) if action.type else value
    sim.set_defaults(**defaults)
    return argv


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv, parser)
        args = parser.parse_args(argv)
        if getattr(args, "out", None) is None and getattr(
                args, "out_required", False):
            parser.error("--out is required for this command")
        return args.func(args)
    except (DataError, DesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
