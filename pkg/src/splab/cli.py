"""Command line: ``splab <subcommand> [options]``.

Every subcommand writes a JSON report (``--report``, default stdout) and exits
with status 0 only if all of its checks pass.  Timestamps go to a separate
``<report>.meta.json`` so the report itself is byte-for-byte reproducible.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from .experiments import RUNNERS, ExperimentConfig, parse_radii
from .grid_solver import write_csv, write_raster
from .regularity import Report

SUBCOMMANDS = (
    "solve",
    "jump",
    "blowup",
    "theta",
    "traces",
    "necessity",
    "apriori",
    "wolff",
    "counterexample",
    "comparison",
    "altcaf",
    "verify-all",
)


def _point(text: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected x,y but got '{text}'")
    return [float(p) for p in parts]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splab", description="Potentials of surface measures: solver and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config; flags override its entries")
        s.add_argument("--curve")
        s.add_argument("--q", dest="q")
        s.add_argument("--domain")
        s.add_argument("--grid", type=int)
        s.add_argument("--nodes", type=int)
        s.add_argument("--radii", type=parse_radii)
        s.add_argument("--samples", type=int)
        s.add_argument("--node", type=int)
        s.add_argument("--method", choices=("greens", "grid"))
        s.add_argument("--probe", dest="probes", type=_point, action="append")
        s.add_argument("--alpha", type=float)
        s.add_argument("--u0", type=float)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--max-steps", dest="max_steps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--report", type=Path, help="write the JSON report here instead of stdout")
        s.add_argument("--csv", type=Path, help="CSV output (fields, tables)")
        s.add_argument("--raster", type=Path, help="binary raster output for grid fields")
        s.add_argument("--dump-config", action="store_true", help="print the canonical config and exit")
        if name == "verify-all":
            s.add_argument("--quick", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_text(args.config.read_text()) if args.config else ExperimentConfig()
    if args.command == "counterexample" and args.radii is None and not args.config:
        cfg.radii = parse_radii("2^-4..2^-12")
    for key in ("curve", "q", "domain", "grid", "nodes", "radii", "samples", "node", "method", "probes", "alpha", "u0", "epsilon", "max_steps", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "quick", False):
        cfg.quick = True
    return cfg


def _emit(report: Report, path, started: float) -> None:
    text = report.to_json()
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).write_text(text)
    meta = {"started": started, "finished": time.time(), "elapsed_s": time.time() - started, "passed": report.passed}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _export(args, artifacts: dict) -> None:
    field = artifacts.get("field")
    if field is not None and args.csv:
        write_csv(field, args.csv)
    if field is not None and args.raster:
        write_raster(field, args.raster)
    table = artifacts.get("table")
    if table is not None and args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "measure_over_r", "bound_over_r"])
            for row in table.rows():
                w.writerow([repr(x) for x in row])


def _checkpoint(args, artifacts: dict, cfg: ExperimentConfig) -> None:
    if not args.raster:
        return
    st = artifacts.get(f"state_{cfg.grid}")
    if st is None:
        return
    write_raster(st.w, args.raster)
    side = {"epsilon": st.epsilon, "iteration": st.iteration, "energy": {"total": st.energy.total, "bending": st.energy.bending, "volume": st.energy.volume}}
    Path(str(args.raster) + ".json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")


def verify_all(cfg: ExperimentConfig) -> Report:
    """Run the full check suite; ``quick`` shrinks grids and node counts."""
    q = cfg.quick
    ellipse = "ellipse:a=0.6,b=0.3"
    q_var = "expr:1+x**2"
    plans = [
        ("radial", dict(grid=256 if q else 512, nodes=2048 if q else 4096)),
        ("jump", dict(q=q_var, samples=4 if q else 16)),
        ("jump", dict(curve=ellipse, q=q_var, samples=4 if q else 16)),
        ("jump", dict(samples=2 if q else 4)),
        ("blowup", dict(radii=[0.1, 0.05, 0.025, 0.0125])),
        ("traces", dict(samples=4 if q else 16)),
        ("traces", dict(curve=ellipse, q=q_var, samples=4 if q else 16)),
        ("necessity", dict(samples=8)),
        ("necessity", dict(curve=ellipse, q=q_var, samples=8)),
        ("apriori", dict(curve="circle:rho=0.3,cx=0.4,cy=0", samples=8)),
        ("wolff", dict(nodes=1024 if q else 4096)),
        ("counterexample", dict(radii=parse_radii("2^-4..2^-12"))),
        # the tube needs 8 cells on the coarse grid
        ("comparison", dict(grid=384 if q else 512)),
        ("regularity", dict(grid=256 if q else 512)),
        ("mollify", dict(nodes=512 if q else 2048)),
        ("altcaf", dict(grid=128 if q else 256)),
    ]
    out = Report(json.loads(cfg.to_text()))
    for name, overrides in plans:
        sub = replace(cfg, **overrides)
        rep, _ = RUNNERS[name](sub)
        for c in rep.checks:
            c.name = f"{name}: {c.name}"
        out.extend(rep.checks)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            sys.stderr.write(json.dumps({"failures": [{"name": "arguments", "error": "could not parse command line"}]}) + "\n")
        return int(exc.code or 0)
    started = time.time()
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"failures": [{"name": "config", "error": str(exc)}]}) + "\n")
        return 2
    if args.dump_config:
        sys.stdout.write(cfg.to_text())
        return 0
    threads = os.environ.get("SPL_THREADS")
    limiter = nullcontext()
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=int(threads))
    try:
        with limiter:
            if args.command == "verify-all":
                report, artifacts = verify_all(cfg), {}
            else:
                report, artifacts = RUNNERS[args.command](cfg)
    except Exception as exc:  # surfaced as a machine-readable failure
        sys.stderr.write(json.dumps({"failures": [{"name": args.command, "error": f"{type(exc).__name__}: {exc}"}]}) + "\n")
        return 3
    if args.command == "solve":
        for p, v in zip(cfg.probes or [[0.0, 0.0]], artifacts["values"]):
            sys.stderr.write(f"{p[0]:g},{p[1]:g}\t")
            print(f"{float(v):.9f}")
        if args.report:
            _emit(report, args.report, started)
    else:
        _emit(report, args.report, started)
    _export(args, artifacts)
    if args.command == "altcaf":
        _checkpoint(args, artifacts, cfg)
    if not report.passed:
        sys.stderr.write(json.dumps({"failures": report.failures()}, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
