"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .core import (
    DataBlock,
    GaussianPrior,
    MalformedState,
    RiccatiState,
    closed_form_posterior,
    evolve,
    evolve_staged,
    init_state,
    load_state,
    posterior,
    save_state,
    tune_observation_variance,
)
from .errors import ConfigError, NumericalError, RiccatiError
from .experiments.config import SCENARIOS, resolve_config
from .experiments.metrics import max_relative_discrepancy
from .experiments.runner import run_scenario
from .prior import CovarianceRetune, scale_prior_covariance, tune_prior_covariance

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("hjriccati")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit status 2; ours is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _unit_interval(text: str) -> float:
    v = _positive_float(text)
    if v > 1:
        raise argparse.ArgumentTypeError(f"scale factor must lie in (0, 1]: {text!r}")
    return v


# ---------------------------------------------------------------------------
# JSON inputs


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def prior_from_json(doc: dict) -> GaussianPrior:
    """``{"lambda": [[...]], "x": [...] or null, "epsilon": 1.0}``."""
    try:
        return GaussianPrior(np.array(doc["lambda"], dtype=float), doc.get("x"), float(doc.get("epsilon", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid prior: {exc}") from exc


def block_from_json(doc: dict) -> DataBlock:
    """``{"phi": [[...]], "y": [...], "sigma2": 1.0}``."""
    try:
        return DataBlock(np.array(doc["phi"], dtype=float), np.array(doc["y"], dtype=float), float(doc["sigma2"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid block: {exc}") from exc


def _step(state: RiccatiState, block: DataBlock, duration: float, h: float | None, operation: str):
    if h is None:
        return evolve_staged(state, block, duration, operation=operation)
    return evolve(state, block, duration, h, operation=operation)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    config = resolve_config(args.scenario, args.config, seed=args.seed, h=args.h,
                            scale=args.scale, paper_scale=args.paper_scale)
    out = args.out or f"runs/{args.scenario}"
    manifest = run_scenario(config, out)
    print(f"scenario {args.scenario}: wrote {len(manifest['files'])} files to {out}")
    for key, val in manifest.get("final_errors", {}).items():
        print(f"  {key} = {val:.6g}")
    print(f"  oracle_discrepancy = {manifest['oracle_discrepancy']:.3g}")
    if "order_discrepancy" in manifest:
        print(f"  order_discrepancy = {manifest['order_discrepancy']:.3g}")
    print(f"  wall_time_s = {manifest['wall_time_s']:.2f}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    """Sequential RK4 incorporation against the closed form.

    The config holds ``prior``, ``blocks`` and optionally ``h`` (a fixed
    step); without ``h`` the stiffness-staged steps are used.
    """
    doc = _read_json(args.config)
    if not isinstance(doc, dict) or "prior" not in doc:
        raise ConfigError("oracle-check config needs a 'prior' object and a 'blocks' list")
    prior = prior_from_json(doc["prior"])
    blocks = [block_from_json(b) for b in doc.get("blocks", [])]
    h = doc.get("h")
    if h is not None and not float(h) > 0:
        raise ConfigError(f"h must be positive, got {h}")
    state = init_state(prior)
    for blk in blocks:
        state = _step(state, blk, blk.time(state.epsilon), None if h is None else float(h), "incorporate")
    mu, sigma = posterior(state, prior.x)
    mu_ref, sigma_ref = closed_form_posterior(prior, blocks)
    d_mu = max_relative_discrepancy(mu, mu_ref)
    d_sigma = max_relative_discrepancy(sigma, sigma_ref)
    print(f"mu_discrepancy={d_mu:.6e}")
    print(f"sigma_discrepancy={d_sigma:.6e}")
    ok = max(d_mu, d_sigma) < args.tol
    print(f"{'PASS' if ok else 'FAIL'} (tol={args.tol:g})")
    return EXIT_OK if ok else EXIT_VERIFY


def _load(path) -> RiccatiState:
    try:
        return load_state(path)
    except OSError as exc:
        raise ConfigError(f"cannot read state {path}: {exc}") from exc


def _save(state: RiccatiState, path) -> None:
    save_state(state, path)
    print(f"wrote {path}")


def cmd_state(args) -> int:
    op = args.op
    if op == "save":
        state = init_state(prior_from_json(_read_json(args.prior)), track_r=args.track_r)
        _save(state, args.out)
        return EXIT_OK
    state = _load(args.state)
    if op == "load":
        print(f"n={state.n} epsilon={state.epsilon:.17g} track_r={int(state.track_r)} spd={int(state.is_spd())}")
        if args.out:
            _save(state, args.out)
        return EXIT_OK
    if op == "posterior":
        x = None if args.x is None else np.array(_read_json(args.x), dtype=float)
        mu, sigma = posterior(state, x)
        print("index,mu,sigma_diag")
        for i, (m, s) in enumerate(zip(mu, np.diag(sigma))):
            print(f"{i},{m:.17g},{s:.17g}")
        return EXIT_OK
    if op in ("incorporate", "retract"):
        blk = block_from_json(_read_json(args.block))
        t = blk.time(state.epsilon)
        _save(_step(state, blk, t if op == "incorporate" else -t, args.h, op), args.out)
        return EXIT_OK
    if op == "tune-sigma":
        blk = block_from_json(_read_json(args.block))
        if args.h is None:
            duration = state.epsilon / args.sigma2_new - blk.time(state.epsilon)
            new = evolve_staged(state, blk, duration, operation="tune_observation_variance")
        else:
            new = tune_observation_variance(state, blk, args.sigma2_new, args.h)
        _save(new, args.out)
        return EXIT_OK
    if op == "tune-prior":
        lam_old = np.array(_read_json(args.lambda_old), dtype=float)
        h = args.h if args.h is not None else 1e-3
        if args.alpha is not None:
            new = scale_prior_covariance(state, lam_old, args.alpha, h)
        elif args.lambda_new is not None:
            lam_new = np.array(_read_json(args.lambda_new), dtype=float)
            new = tune_prior_covariance(state, CovarianceRetune(lam_old, lam_new), h=h)
        else:
            raise UsageError("tune-prior needs --alpha or --lambda-new")
        _save(new, args.out)
        return EXIT_OK
    raise UsageError(f"unknown state operation {op!r}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hjriccati", description="Bayesian regression by Riccati flows: experiments and state tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment scenario")
    run.add_argument("scenario", choices=SCENARIOS)
    run.add_argument("--config", help="JSON config (all scenarios or one scenario object)")
    run.add_argument("--out", help="output directory (default runs/<scenario>)")
    run.add_argument("--seed", type=int)
    run.add_argument("--h", type=_positive_float, help="fixed RK4 step for every flow")
    run.add_argument("--scale", type=_unit_interval, help="desk-scale factor in (0, 1]")
    run.add_argument("--paper-scale", action="store_true", help="published problem sizes")
    run.set_defaults(func=cmd_run)

    oc = sub.add_parser("oracle-check", help="compare RK4 incorporation with the closed form")
    oc.add_argument("--config", required=True)
    oc.add_argument("--tol", type=_positive_float, default=1e-6)
    oc.set_defaults(func=cmd_oracle_check)

    st = sub.add_parser("state", help="operate on state checkpoint files")
    ops = st.add_subparsers(dest="op", required=True, parser_class=_Parser)
    save = ops.add_parser("save", help="write the initial state of a prior")
    save.add_argument("--prior", required=True, help="prior JSON: lambda, x, epsilon")
    save.add_argument("--out", required=True)
    save.add_argument("--track-r", action="store_true")

    load = ops.add_parser("load", help="validate a checkpoint (and optionally rewrite it)")
    load.add_argument("state")
    load.add_argument("--out")

    post = ops.add_parser("posterior", help="print mean and covariance diagonal as CSV")
    post.add_argument("state")
    post.add_argument("--x", help="JSON list: evaluation point")

    for name in ("incorporate", "retract"):
        q = ops.add_parser(name, help=f"{name} a data block")
        q.add_argument("state")
        q.add_argument("--block", required=True, help="block JSON: phi, y, sigma2")
        q.add_argument("--out", required=True)
        q.add_argument("--h", type=_positive_float, help="fixed RK4 step (default: staged)")

    ts = ops.add_parser("tune-sigma", help="move a block's noise variance")
    ts.add_argument("state")
    ts.add_argument("--block", required=True, help="block JSON with its current sigma2")
    ts.add_argument("--sigma2-new", type=_positive_float, required=True)
    ts.add_argument("--out", required=True)
    ts.add_argument("--h", type=_positive_float)

    tp = ops.add_parser("tune-prior", help="change the prior covariance factor")
    tp.add_argument("state")
    tp.add_argument("--lambda-old", required=True, help="JSON matrix")
    tp.add_argument("--lambda-new", help="JSON matrix (two-phase swap)")
    tp.add_argument("--alpha", type=_positive_float, help="scale factor (one-phase flow)")
    tp.add_argument("--out", required=True)
    tp.add_argument("--h", type=_positive_float, help="fixed RK4 step (default 1e-3)")
    st.set_defaults(func=cmd_state)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, MalformedState) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RiccatiError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
