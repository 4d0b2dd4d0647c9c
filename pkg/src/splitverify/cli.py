"""Command-line interface: ``splitverify {certify,bounds,reach} ...``.

Exit codes: 0 success (``certify``: certified robust), 1 not certified,
2 usage or I/O error, 3 solver failure. Reports are JSON with sorted keys
and no timing data, so repeated runs produce identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

import numpy as np

from .driver import (
    MisclassifiedError,
    ReachQuery,
    RobustnessQuery,
    certify_robustness,
    compute_bounds,
    empirical_upper_bound,
    margin_objectives,
    output_range,
    reach_boxes,
)
from .io import FormatError, load_array_file, load_bounds, load_network, save_bounds
from .model import ShapeError
from .proj import SizeGuardError
from .relax import Box, LpBall
from .solver import SolverConfig, SolverDivergedError, build_caches, write_trace_csv

EXIT_OK = 0
EXIT_NOT_CERTIFIED = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3


class UsageError(Exception):
    pass


def _norm(s: str):
    if s in ("inf", "Inf", "INF"):
        return np.inf
    if s in ("1", "2"):
        return int(s)
    raise argparse.ArgumentTypeError("norm must be 1, 2 or inf")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitverify",
        description="Certified bounds for ReLU networks via an ADMM-solved LP relaxation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--net", required=True, help="network JSON file")
    common.add_argument("--input", required=True,
                        help="JSON file with a point (array) or a box ({lower, upper})")
    common.add_argument("--norm", type=_norm, default=np.inf, help="ball norm: 1, 2 or inf")
    common.add_argument("--epsilon", type=float, default=None,
                        help="ball radius around the input point (0 = the point itself)")
    common.add_argument("--rho0", type=float, default=1.0)
    common.add_argument("--eps-abs", type=float, default=1e-4)
    common.add_argument("--eps-rel", type=float, default=1e-3)
    common.add_argument("--max-iter", type=_positive_int, default=20000)
    common.add_argument("--balancing", choices=("on", "off"), default="on")
    common.add_argument("--tau", type=float, default=2.0)
    common.add_argument("--mu-rb", type=float, default=10.0)
    common.add_argument("--bound-source", choices=("interval", "linear", "admm"), default="linear")
    common.add_argument("--trace", default=None, help="write the residual trace CSV here")
    common.add_argument("--out", default=None, help="report path (default: standard output)")
    common.add_argument("--seed", type=int, default=0, help="seed for the sampling checks")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker cap (runs single-process)")
    common.add_argument("--bounds-in", default=None, help="reuse pre-activation bounds from this file")
    common.add_argument("--bounds-out", default=None, help="save the pre-activation bounds here")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("certify", parents=[common], help="certify local robustness of a classifier")
    p.add_argument("--true-class", type=int, required=True)
    p.add_argument("--samples", type=int, default=1000,
                   help="random inputs used for the empirical sanity check (0 disables it)")
    p.set_defaults(handler=cmd_certify_args)

    p = sub.add_parser("bounds", parents=[common], help="bound the network outputs over the input set")
    p.add_argument("--layerwise", action="store_true",
                   help="also write the per-layer pre-activation bounds as a bounds file")
    p.set_defaults(handler=cmd_bounds_args)

    p = sub.add_parser("reach", parents=[common], help="reachable-set boxes of neural dynamics")
    p.add_argument("--horizon", type=int, required=True)
    p.set_defaults(handler=cmd_reach_args)
    return parser


# helpers --------------------------------------------------------------------


def _config(args) -> SolverConfig:
    try:
        return SolverConfig(
            rho0=args.rho0,
            eps_abs=args.eps_abs,
            eps_rel=args.eps_rel,
            max_iter=args.max_iter,
            balancing=args.balancing == "on",
            tau=args.tau,
            mu_rb=args.mu_rb,
            bound_source=args.bound_source,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _input_set(args):
    """Returns ``(input_set, nominal_point_or_None)``."""
    data = load_array_file(args.input)
    if isinstance(data, tuple):
        if args.epsilon is not None:
            raise UsageError("--epsilon applies to a point input, not a box file")
        return Box(*data), None
    x = data.reshape(-1)
    if args.epsilon is None:
        raise UsageError("a point input needs --epsilon")
    if args.epsilon < 0:
        raise UsageError("--epsilon must be non-negative")
    if args.epsilon == 0:
        return Box.point(x), x
    return LpBall(x, args.epsilon, args.norm), x


def _config_dict(cfg: SolverConfig, args, **extra) -> dict:
    d = asdict(cfg)
    d.pop("time_limit")
    d.update(norm=str(args.norm), epsilon=args.epsilon, seed=args.seed, **extra)
    return d


def _write_report(payload: dict, path) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True, allow_nan=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _bounds(args, net, input_set, cfg, caches):
    if args.bounds_in:
        bounds = load_bounds(args.bounds_in)
        bounds.check(net)
    else:
        bounds = compute_bounds(net, input_set, cfg, caches)
    if args.bounds_out:
        save_bounds(bounds, args.bounds_out)
    return bounds


def _finite(a):
    return [float(v) if np.isfinite(v) else None for v in np.asarray(a, dtype=float)]


# commands -------------------------------------------------------------------


def cmd_certify_args(args) -> int:
    net = load_network(args.net)
    input_set, x = _input_set(args)
    if x is None:
        raise UsageError("certify needs a nominal point as --input")
    cfg = _config(args)
    q = RobustnessQuery(net, x, args.true_class, input_set, cfg)
    caches = build_caches(net)
    bounds = _bounds(args, net, input_set, cfg, caches)
    report = certify_robustness(q, bounds, caches)
    payload = report.to_dict()
    if args.samples > 0:
        C, _ = margin_objectives(net.output_dim, args.true_class)
        emp = [empirical_upper_bound(net, input_set, C[:, j], args.samples, seed=args.seed)
               for j in range(C.shape[1])]
        payload["empirical_upper_bounds"] = emp
    payload["config"] = _config_dict(cfg, args, true_class=args.true_class)
    _write_report(payload, args.out)
    if args.trace:
        write_trace_csv(report.certificate, args.trace)
    return EXIT_OK if report.certified else EXIT_NOT_CERTIFIED


def cmd_bounds_args(args) -> int:
    net = load_network(args.net)
    input_set, _ = _input_set(args)
    cfg = _config(args)
    caches = build_caches(net)
    bounds = _bounds(args, net, input_set, cfg, caches)
    if args.layerwise and not args.bounds_out:
        raise UsageError("--layerwise needs --bounds-out for the per-layer bounds file")
    lo, hi, cert = output_range(net, input_set, cfg, bounds, caches, return_certificate=True)
    payload = {
        "lower": _finite(lo),
        "upper": _finite(hi),
        "status": list(cert.status),
        "iters": [int(i) for i in cert.iters],
        "residuals": {k: _finite(v) for k, v in (
            ("r_p", cert.final_residuals.r_p), ("r_d", cert.final_residuals.r_d),
            ("eps_p", cert.final_residuals.eps_p), ("eps_d", cert.final_residuals.eps_d))},
        "rho_trace": [[list(p) for p in tr] for tr in cert.rho_trace],
        "config": _config_dict(cfg, args),
    }
    if args.layerwise:
        payload["layers"] = [
            {"layer": k, "lower": _finite(a), "upper": _finite(b)}
            for k, (a, b) in enumerate(zip(bounds.lower, bounds.upper))
        ]
    _write_report(payload, args.out)
    if args.trace:
        write_trace_csv(cert, args.trace)
    return EXIT_OK


def cmd_reach_args(args) -> int:
    dyn = load_network(args.net)
    input_set, _ = _input_set(args)
    cfg = _config(args)
    if args.horizon < 1:
        raise UsageError("--horizon must be at least 1")
    if args.bounds_in:
        raise UsageError("reach computes its own bounds; --bounds-in is not supported here")
    try:
        q = ReachQuery(dyn, args.horizon, input_set, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = reach_boxes(q)
    if args.bounds_out:
        save_bounds(result.bounds, args.bounds_out)
    payload = result.to_dict()
    payload["config"] = _config_dict(cfg, args, horizon=args.horizon)
    _write_report(payload, args.out)
    return EXIT_OK


# entry points ---------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.handler(args)
    except (UsageError, FormatError, ShapeError, MisclassifiedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverDivergedError, SizeGuardError, ArithmeticError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def cmd_certify(argv) -> int:
    return main(["certify", *argv])


def cmd_bounds(argv) -> int:
    return main(["bounds", *argv])


def cmd_reach(argv) -> int:
    return main(["reach", *argv])


if __name__ == "__main__":
    sys.exit(main())
