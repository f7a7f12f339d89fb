"""Command-line front end.

Commands: ``validate``, ``solve``, ``simulate``, ``oep``,
``bayes-demo``, ``section``.  Every run writes a manifest
(``manifest.json``) into its output directory recording the command,
config hash, seed and timings.  Exit codes: 0 ok, 1 invalid config,
2 numerical failure, 3 I/O error.  ``CATQVI_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bonds import BondBook
from .config import ConfigError, ModelBundle, config_hash, load_raw, validate_config
from .dump import DumpWriter, read_dump, section_csv
from .filters import (
    GammaPosterior,
    ScenarioWeights,
    gamma_advance,
    gamma_jump,
    scenario_advance,
    scenario_jump,
)
from .market import build_layers
from .simulate import (
    PolicyView,
    ScenarioTruth,
    run_monte_carlo,
    verify_cash_identity,
    write_density_csv,
    write_event_log,
    write_summary_json,
)
from .solver import SolverError, build_workspace, solve

log = logging.getLogger("catqvi")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _setup_logging() -> None:
    level = os.environ.get("CATQVI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load(config_arg: str, grid_overrides) -> tuple[ModelBundle, str]:
    raw, data = load_raw(config_arg)
    for item in grid_overrides or []:
        key, _, value = item.partition("=")
        if not value:
            raise ConfigError([f"--grid override {item!r} must look like axis.field=value"])
        node = raw.setdefault("grid", {})
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = float(value)
    bundle = validate_config(raw)
    return bundle, config_hash(data)


def _layers(bundle: ModelBundle):
    return build_layers(
        bundle.prior,
        bundle.severity,
        bundle.intensity,
        return_periods=bundle.return_periods,
        warming_slope=bundle.layer_warming_slope,
        horizon=bundle.econ.T,
    )


def _write_manifest(outdir: Path, command: str, config_arg: str, sha: str, seed, timings: dict) -> None:
    manifest = {
        "command": command,
        "config": str(config_arg),
        "config_sha256": sha,
        "seed": seed,
        "output_dir": str(outdir),
        "tool_version": __version__,
        "timings_s": timings,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_validate(args) -> int:
    try:
        raw, data = load_raw(args.config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        validate_config(raw)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {args.config} ({config_hash(data)[:12]})")
    return EXIT_OK


def cmd_solve(args) -> int:
    t_start = time.perf_counter()
    bundle, sha = _load(args.config, args.grid)
    if bundle.grid is None:
        raise ConfigError(["grid: a solve requires a grid section (or --grid overrides)"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    layers = _layers(bundle)
    ws = build_workspace(
        bundle.grid,
        bundle.econ,
        bundle.severity,
        bundle.intensity,
        layers,
        bundle.prior,
        severity_posterior=bundle.severity_posterior,
        eps_atoms=bundle.eps_atoms,
        eps_weights=bundle.eps_weights,
    )
    with open(outdir / "cfl_report.json", "w") as fh:
        json.dump(ws.cfl_report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "coverage_report.json", "w") as fh:
        json.dump(ws.coverage_report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    t_build = time.perf_counter()
    writer = DumpWriter(outdir / "value_policy.cbqv", ws, sha)
    try:
        solve(ws, slice_hook=writer)
    finally:
        writer.close()
    t_solve = time.perf_counter()
    print(f"solved {ws.n_steps + 1} slices, {ws.node_count()} nodes/slice -> {outdir}")
    _write_manifest(
        outdir,
        "solve",
        args.config,
        sha,
        None,
        {"build": round(t_build - t_start, 3), "solve": round(t_solve - t_build, 3)},
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    t_start = time.perf_counter()
    bundle, sha = _load(args.config, None)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    layers = _layers(bundle)

    policy = None
    if not args.no_bonds:
        if not args.policy:
            raise ConfigError(["--policy DUMP is required unless --no-bonds is given"])
        data = read_dump(args.policy)
        if data.config_sha256 and data.config_sha256 != sha and not args.force:
            print(
                "error: policy dump was solved from a different config "
                f"({data.config_sha256[:12]} != {sha[:12]}); pass --force to override",
                file=sys.stderr,
            )
            return EXIT_CONFIG
        policy = PolicyView.from_dump(data)

    sim_cfg = bundle.simulate
    seed = args.seed if args.seed is not None else int(sim_cfg.get("seed", 0))
    n_paths = args.n_paths if args.n_paths is not None else int(sim_cfg.get("n_paths", 1000))
    lambda0 = args.lambda0 if args.lambda0 is not None else float(sim_cfg.get("lambda0", 0.5))
    mode = str(sim_cfg.get("severity_mode", "atoms"))
    truth = ScenarioTruth(lambda0=lambda0, seed=seed, n_paths=n_paths, severity_mode=mode)
    summary = run_monte_carlo(
        bundle, layers, truth, policy=policy, collect_paths=args.paths, workers=args.threads
    )
    write_summary_json(outdir / "summary.json", summary, extra={"config_sha256": sha})
    write_density_csv(outdir / "final_cash_density.csv", summary.final_cash)
    np.savetxt(outdir / "final_cash.csv", summary.final_cash, header="final_cash", comments="")
    for i, rec in enumerate(summary.paths):
        write_event_log(outdir / f"path_{i:04d}.csv", rec)
        residual = verify_cash_identity(rec, bundle)
        if residual > 1e-8:
            print(f"error: cash identity residual {residual:.2e} on path {i}", file=sys.stderr)
            return EXIT_NUMERIC
    _write_manifest(
        outdir,
        "simulate",
        args.config,
        sha,
        seed,
        {"total": round(time.perf_counter() - t_start, 3)},
    )
    print(
        f"simulated {n_paths} paths: mean cash {summary.mean_cash:.4f}, "
        f"sd {summary.sd_cash:.4f}, q0.5% {summary.quantile_half_pct:.4f} -> {outdir}"
    )
    return EXIT_OK


def cmd_oep(args) -> int:
    bundle, sha = _load(args.config, None)
    layers = _layers(bundle)
    periods = [float(p) for p in args.periods.split(",")] if args.periods else list(bundle.return_periods)
    times = [float(t) for t in args.times.split(",")] if args.times else [0.0]
    for tau in periods:
        if tau <= 1.0:
            raise ConfigError([f"return period {tau} must exceed one year"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for tau in periods:
        if tau not in layers.return_periods:
            layers2 = _layers(
                ModelBundle(
                    **{
                        **bundle.__dict__,
                        "return_periods": tuple(sorted(set(bundle.return_periods) | {tau})),
                    }
                )
            )
        else:
            layers2 = layers
        for t in times:
            rows.append([tau, layers2.oep_at(tau, t), t])
    out_path = outdir / "oep.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["return_period", "threshold", "t"])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    _write_manifest(outdir, "oep", args.config, sha, None, {})
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_bayes_demo(args) -> int:
    bundle, sha = _load(args.config, None)
    try:
        times = [float(line) for line in Path(args.events).read_text().split()]
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if any(b < a for a, b in zip(times, times[1:])):
        raise ConfigError(["event times must be sorted"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    horizon = bundle.econ.T
    step = float(args.step)
    lattice = sorted(set(np.arange(0.0, horizon + step / 2, step)) | set(times))
    post = bundle.prior
    is_gamma = isinstance(post, GammaPosterior)
    rows = []
    t_prev = 0.0
    events = iter(times)
    next_ev = next(events, None)
    for t in lattice:
        if is_gamma:
            post = gamma_advance(post, t_prev, t, bundle.intensity)
        else:
            post = scenario_advance(post, t_prev, t, bundle.intensity)
        while next_ev is not None and abs(next_ev - t) < 1e-12:
            post = gamma_jump(post) if is_gamma else scenario_jump(post, t, bundle.intensity)
            next_ev = next(events, None)
        rows.append([t] + ([post.mean, post.sd] if is_gamma else list(post.array)))
        t_prev = t
    out_path = outdir / "posterior.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean", "sd"] if is_gamma else ["t"] + [f"w{i+1}" for i in range(len(post.array))])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    _write_manifest(outdir, "bayes-demo", args.config, sha, None, {})
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_section(args) -> int:
    data = read_dump(args.dump)
    fixed = {}
    for item in args.fix or []:
        ax, _, idx = item.partition("=")
        fixed[int(ax)] = int(idx)
    header, rows = section_csv(data, args.slice, args.cls, fixed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catqvi", description=__doc__)
    parser.add_argument("--version", action="version", version=f"catqvi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file or profile name")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="solve the issuance system and dump value/policy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", metavar="AXIS.FIELD=VALUE", help="grid override, repeatable")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="Monte Carlo under a solved policy or --no-bonds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="CBQV1 dump from solve")
    p.add_argument("--no-bonds", action="store_true", help="baseline without any issuance")
    p.add_argument("--force", action="store_true", help="accept a policy dump with a different config hash")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--paths", type=int, default=0, help="write full event logs for the first N paths")
    p.add_argument("--threads", type=int, default=1, help="worker processes (results are identical for any count)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oep", help="tabulate exceedance thresholds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--periods", help="comma-separated return periods")
    p.add_argument("--times", help="comma-separated times")
    p.set_defaults(func=cmd_oep)

    p = sub.add_parser("bayes-demo", help="posterior trajectory for a given event-times file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--events", required=True, help="text file with one event time per line")
    p.add_argument("--step", default="0.1", help="reporting step in years")
    p.set_defaults(func=cmd_bayes_demo)

    p = sub.add_parser("section", help="export a 2-D section of a dump to CSV")
    p.add_argument("dump")
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--cls", type=int, default=0, help="bond-configuration class index")
    p.add_argument("--fix", action="append", metavar="AXIS=INDEX", help="fix an axis, repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_section)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
