"""Command-line front door: validate / solve / simulate / evaluate / report.

Every subcommand reads a scenario file, writes its artifacts into the
output directory and finishes with a run manifest listing them.  Exit
codes: 0 success, 1 validation or assertion failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .funds import FundSet
from .hjb import (StabilityError, export_binary, export_csv, solve_bellman,
                  unrestricted_argmax_check)
from .market import validate_spec
from .policyeval import (ConstantControl, GridPolicyStrategy, McParams,
                         ZeroStrategy, epsilon_optimality_report, evaluate,
                         merton_oracle)
from .scenario import PRESETS, ScenarioError, load_scenario

SPAN_RESIDUAL_GATE = 1e-6


class _Run:
    """Collects emitted files; writes the manifest last."""

    def __init__(self, outdir, subcommand, spec_hash):
        self.outdir = outdir
        self.subcommand = subcommand
        self.spec_hash = spec_hash
        self.started = time.time()
        self.files = []
        os.makedirs(outdir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.outdir, name)
        self.files.append(p)
        return p

    def finish(self):
        manifest = {
            "tool": "fundspan",
            "version": __version__,
            "subcommand": self.subcommand,
            "spec_hash": self.spec_hash,
            "started_unix": self.started,
            "finished_unix": time.time(),
            "outputs": self.files,
        }
        path = os.path.join(self.outdir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        return path


def _hash_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _load(args) -> tuple:
    if not args.scenario:
        raise ScenarioError("--scenario PATH is required")
    bundle = load_scenario(args.scenario)
    if args.seed is not None:
        bundle.mc = McParams(steps=bundle.mc.steps, paths=bundle.mc.paths,
                             seed=args.seed)
    if args.paths is not None:
        bundle.mc = McParams(steps=bundle.mc.steps, paths=args.paths,
                             seed=bundle.mc.seed)
    if args.steps is not None:
        bundle.mc = McParams(steps=args.steps, paths=bundle.mc.paths,
                             seed=bundle.mc.seed)
    if args.grid:
        try:
            nx, ny, nz, nt = (tok.strip() for tok in args.grid.split(","))
            gp = bundle.grid_params
            gp.x_nodes = int(nx)
            if int(ny) > 0:
                gp.factor_nodes = int(ny)
            if int(nz) > 0 and bundle.spec.M > 0:
                gp.factor_nodes = int(nz)
            gp.t_steps = int(nt) if int(nt) > 0 else None
        except ValueError as exc:
            raise ScenarioError(f"--grid expects 'nx,ny,nz,nt': {exc}")
    outdir = args.out or bundle.output.directory
    return bundle, outdir, _hash_file(args.scenario)


def _strategy_from_name(name, bundle, policy=None):
    spec = bundle.spec
    if name == "zero":
        return ZeroStrategy(spec.n)
    if name == "oracle":
        oracle = merton_oracle(spec, bundle.utility)
        return ConstantControl(oracle.fraction, name="oracle")
    if name.startswith("constant:"):
        vec = np.array([float(x) for x in name.split(":", 1)[1].split(",")])
        return ConstantControl(vec)
    if name == "policy":
        if policy is None:
            raise ScenarioError("policy strategy needs a solved grid")
        return GridPolicyStrategy(policy)
    raise ScenarioError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "validate", spec_hash)
    report = validate_spec(bundle.spec, sample_count=256, seed=bundle.mc.seed)
    if 1 + bundle.spec.m + bundle.spec.M >= 3:
        report.notes.append(
            "state dimension 1+m+M reaches the desk-scale budget (3); "
            "grid solves will be slow or need coarser axes")
    text = report.to_text()
    with open(run.path("validation.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    run.finish()
    return 0 if report.passed else 1


def cmd_solve(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "solve", spec_hash)
    spec = bundle.spec
    grid = bundle.build_grid(seed=bundle.mc.seed)
    try:
        value, policy = solve_bellman(
            spec, bundle.utility, grid,
            max_stored_slices=bundle.grid_params.max_stored_slices)
    except StabilityError as exc:
        print(f"stability refusal: {exc}", file=sys.stderr)
        run.finish()
        return 1

    fund_set = FundSet(spec)
    from .hjb import extract_fund_policy
    fp = extract_fund_policy(policy, fund_set, value)

    fmt = args.format or bundle.output.formats
    if isinstance(fmt, str):
        fmt = (fmt,)
    if "csv" in fmt:
        export_csv(value, policy, run.path("policy_t0.csv"), slices=[0])
    if "binary" in fmt:
        export_binary(value, policy, run.path("solution.bin"))

    summary = [
        f"spec_hash: {spec_hash}",
        f"funds used (mu): {fund_set.mu} [{fund_set.basis_tag}]",
        f"grid: {grid.shape} t_steps={grid.t_steps}",
        f"max span residual: {fp.max_span_residual:.3e}",
        f"max |H_top - kappa J_x|: {fp.max_H_top_error:.3e}",
        f"degenerate nodes: {fp.degenerate_nodes}/{fp.checked_nodes}",
    ]
    text = "\n".join(summary)
    with open(run.path("solve_summary.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    run.finish()
    return 0 if fp.max_span_residual <= SPAN_RESIDUAL_GATE else 1


def cmd_simulate(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "simulate", spec_hash)
    from .market import simulate_paths

    strategy = _strategy_from_name(args.strategy or "zero", bundle)
    bundle_paths = simulate_paths(bundle.spec, strategy,
                                  steps=bundle.mc.steps,
                                  paths=bundle.mc.paths, seed=bundle.mc.seed,
                                  record="full")
    bundle_paths.to_csv(run.path("paths.csv"))
    print(f"simulated {bundle_paths.paths} paths "
          f"({bundle_paths.excluded_paths} excluded), seed {bundle.mc.seed}")
    run.finish()
    return 0


def cmd_evaluate(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "evaluate", spec_hash)
    spec = bundle.spec
    name = args.strategy or "policy"
    policy = None
    if name == "policy":
        grid = bundle.build_grid(seed=bundle.mc.seed)
        _, policy = solve_bellman(
            spec, bundle.utility, grid,
            max_stored_slices=bundle.grid_params.max_stored_slices)
    strategy = _strategy_from_name(name, bundle, policy)
    result = evaluate(spec, strategy, bundle.utility, bundle.mc.steps,
                      bundle.mc.paths, bundle.mc.seed)
    text = (f"strategy: {getattr(strategy, 'name', name)}\n"
            f"spec_hash: {spec_hash}\nseed: {bundle.mc.seed}\n{result}")
    with open(run.path("evaluation.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    run.finish()
    return 0 if not result.flagged else 1


def cmd_report(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "report", spec_hash)
    grid = bundle.build_grid(seed=bundle.mc.seed)
    report = epsilon_optimality_report(bundle.spec, bundle.utility, grid,
                                       mc=bundle.mc, spec_hash=spec_hash)
    with open(run.path("report.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    report.to_csv(run.path("report.csv"))
    print(report.to_text())
    run.finish()
    return 0 if report.passed else 1


def cmd_argmax_check(args) -> int:
    bundle, outdir, spec_hash = _load(args)
    run = _Run(outdir, "argmax-check", spec_hash)
    grid = bundle.build_grid(seed=bundle.mc.seed)
    value, _ = solve_bellman(
        bundle.spec, bundle.utility, grid,
        max_stored_slices=bundle.grid_params.max_stored_slices)
    rep = unrestricted_argmax_check(value, bundle.spec, grid,
                                    samples=args.samples or 200,
                                    seed=bundle.mc.seed)
    text = (f"spec_hash: {spec_hash}\n"
            f"sampled nodes: {rep.sampled_nodes}\n"
            f"informative nodes: {rep.informative_nodes}\n"
            f"within tolerance ({rep.residual_tolerance:g}): "
            f"{rep.passing_nodes} ({100 * rep.passing_fraction:.2f}%)\n"
            f"max residual (informative): {rep.max_residual_informative:.3e}")
    with open(run.path("argmax_check.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    run.finish()
    return 0 if rep.passing_fraction >= 0.99 else 1


def cmd_presets(args) -> int:
    outdir = args.out or "presets"
    run = _Run(outdir, "presets", "-")
    for name, text in PRESETS.items():
        with open(run.path(f"{name}.ini"), "w") as fh:
            fh.write(text)
    print(f"wrote {len(PRESETS)} preset scenarios to {outdir}")
    run.finish()
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fundspan",
        description="factor-market HJB solver and mutual-fund span lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="scenario file path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--grid", default=None,
                       help="'nx,ny,nz,nt' grid override (0 = keep/auto)")
        p.add_argument("--format", default=None, choices=["csv", "binary"])

    common(sub.add_parser("validate", help="check the market assumptions"))
    common(sub.add_parser("solve", help="solve the grid Bellman equation"))
    p = sub.add_parser("simulate", help="simulate paths under a strategy")
    common(p)
    p.add_argument("--strategy", default="zero",
                   help="zero | oracle | constant:a,b,... | policy")
    p = sub.add_parser("evaluate", help="Monte Carlo value of a strategy")
    common(p)
    p.add_argument("--strategy", default="policy",
                   help="zero | oracle | constant:a,b,... | policy")
    common(sub.add_parser("report", help="sub-optimality report"))
    p = sub.add_parser("argmax-check",
                       help="closed-form-free span witness at sampled nodes")
    common(p)
    p.add_argument("--samples", type=int, default=None)
    p = sub.add_parser("presets", help="write the preset scenario files")
    p.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "argmax-check": cmd_argmax_check,
    "presets": cmd_presets,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
