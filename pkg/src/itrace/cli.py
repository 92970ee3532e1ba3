"""Command-line interface.

itrace run --scene FILE [--config FILE] [flags...]   trace and write results
itrace gen --kind {canyon,grid} --out FILE [...]     generate a scene mesh

Config files are flat key=value text ("#" comments); every key mirrors a CLI
flag and the CLI wins on conflict.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .engine import (
    ConfigError,
    SimConfig,
    fops_grid,
    fops_line,
    run,
    write_results,
)
from .fields import RadioConfig
from .scene import SceneError, generate_scene, load_scene, write_scene
from .vistree import MemoryBudgetError, TreeLimits


def _parse_vec3(s: str) -> np.ndarray:
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {s!r}")
    return np.array(parts)


def _parse_fops_line(s: str) -> np.ndarray:
    try:
        a, b, n = s.split(":")
        return fops_line(_parse_vec3(a), _parse_vec3(b), int(n))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected x0,y0,z0:x1,y1,z1:N, got {s!r}"
        ) from exc


def _parse_fops_grid(s: str) -> np.ndarray:
    try:
        corner0, corner1, counts, z = s.split(":")
        x0, y0 = (float(v) for v in corner0.split(","))
        x1, y1 = (float(v) for v in corner1.split(","))
        nx, ny = (int(v) for v in counts.split(","))
        return fops_grid(x0, y0, x1, y1, nx, ny, float(z))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected x0,y0:x1,y1:NX,NY:z, got {s!r}"
        ) from exc


def _load_config_file(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


_RUN_DEFAULTS = {
    "tx": "0,0,10",
    "freq": "28e9",
    "power": "1.0",
    "max_bounce": "2",
    "max_diff": "1",
    "partitions": "1",
    "batch_cap": str(2**20),
    "workers": "1",
    "vis_mode": "plane-cull",
    "memory_budget_mb": "4096",
    "dipole_axis": "0,0,1",
    "seed": "0",
}


def _add_run_parser(sub):
    p = sub.add_parser("run", help="trace a scene and write per-point fields")
    p.add_argument("--scene", required=True, help="mesh file (v/f lines)")
    p.add_argument("--config", help="key=value config file; CLI flags win")
    p.add_argument("--tx", help="transmitter x,y,z")
    p.add_argument("--freq", help="frequency in Hz")
    p.add_argument("--power", help="radiated power in W")
    p.add_argument("--dipole-axis", help="dipole axis x,y,z")
    p.add_argument("--max-bounce", help="max reflections (0..6)")
    p.add_argument("--max-diff", help="max diffractions (0 or 1)")
    p.add_argument("--fops-line", help="x0,y0,z0:x1,y1,z1:N")
    p.add_argument("--fops-grid", help="x0,y0:x1,y1:NX,NY:z")
    p.add_argument("--no-ars", action="store_true", default=None,
                   help="disable beam shrinking (reference mode)")
    p.add_argument("--partitions", help="visibility-tree partition count")
    p.add_argument("--batch-cap", help="max pairs per shadow-test batch")
    p.add_argument("--workers", help="parallel workers")
    p.add_argument("--no-pipeline", action="store_true", default=None,
                   help="run shadow testing and fields strictly serially")
    p.add_argument("--vis-mode", help="plane-cull | plane-cull+occlusion-sampling")
    p.add_argument("--memory-budget-mb", help="tree arena budget")
    p.add_argument("--seed", help="generator seed echo (recorded only)")
    p.add_argument("--out", help="results CSV path")
    p.add_argument("--plot", help="figure path (default: alongside --out)")
    p.add_argument("--no-plot", action="store_true", help="skip the report figure")
    p.add_argument("--dump-paths", help="JSONL per-path debug dump")
    p.add_argument("--stats", help="summary JSON path")
    return p


def _add_gen_parser(sub):
    p = sub.add_parser("gen", help="generate a procedural scene mesh")
    p.add_argument("--kind", required=True, choices=["canyon", "grid"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=5)
    p.add_argument("--block", type=float, default=30.0)
    p.add_argument("--street", type=float, default=25.0)
    p.add_argument("--buildings-per-side", type=int, default=3)
    p.add_argument("--building-w", type=float, default=30.0)
    p.add_argument("--building-d", type=float, default=15.0)
    p.add_argument("--street-width", type=float, default=20.0)
    p.add_argument("--height-min", type=float, default=10.0)
    p.add_argument("--height-max", type=float, default=35.0)
    p.add_argument("--ground-divisions", type=int, default=2)
    return p


def _cmd_run(args) -> int:
    cfgfile = _load_config_file(args.config) if args.config else {}

    def opt(key, cli_value):
        if cli_value is not None:
            return cli_value
        if key in cfgfile:
            return cfgfile[key]
        return _RUN_DEFAULTS.get(key)

    tx = _parse_vec3(opt("tx", args.tx))
    radio = RadioConfig(
        frequency=float(opt("freq", args.freq)),
        radiated_power=float(opt("power", args.power)),
        dipole_axis=_parse_vec3(opt("dipole_axis", args.dipole_axis)),
    )
    limits = TreeLimits(
        max_reflections=int(opt("max_bounce", args.max_bounce)),
        max_diffractions=int(opt("max_diff", args.max_diff)),
        partition_count=int(opt("partitions", args.partitions)),
    )

    fops = None
    if args.fops_line:
        fops = _parse_fops_line(args.fops_line)
    elif args.fops_grid:
        fops = _parse_fops_grid(args.fops_grid)
    elif "fops_line" in cfgfile:
        fops = _parse_fops_line(cfgfile["fops_line"])
    elif "fops_grid" in cfgfile:
        fops = _parse_fops_grid(cfgfile["fops_grid"])
    if fops is None:
        raise ConfigError("no observation points: pass --fops-line or --fops-grid")

    ars = True
    if args.no_ars is not None:
        ars = False
    elif cfgfile.get("no_ars", "false").lower() in ("1", "true", "yes"):
        ars = False
    pipeline = True
    if args.no_pipeline is not None:
        pipeline = False
    elif cfgfile.get("no_pipeline", "false").lower() in ("1", "true", "yes"):
        pipeline = False

    scene = load_scene(args.scene)
    sim = SimConfig(
        radio=radio,
        tx=tx,
        fops=fops,
        limits=limits,
        batch_cap=int(opt("batch_cap", args.batch_cap)),
        ars_enabled=ars,
        visibility_mode=opt("vis_mode", args.vis_mode),
        workers=int(opt("workers", args.workers)),
        pipeline=pipeline,
        memory_budget_mb=float(opt("memory_budget_mb", args.memory_budget_mb)),
        seed=int(opt("seed", args.seed)),
        dump_paths=args.dump_paths or cfgfile.get("dump_paths"),
    )
    res = run(sim, scene)

    out = args.out or cfgfile.get("out")
    if out:
        write_results(res, out, stats_path=args.stats or cfgfile.get("stats"))
        if not args.no_plot:
            from .report import save_report_figure
            from pathlib import Path

            plot = args.plot or cfgfile.get("plot") or Path(out).with_suffix(".png")
            save_report_figure(res, plot)
    else:
        mags = res.magnitude
        for i in range(len(mags)):
            print(f"{i} {mags[i]:.6e} V/m  paths={int(res.path_count[i])}")
    print(
        f"done: {len(res.fops)} points, {int(res.path_count.sum())} paths, "
        f"{res.st_pairs} tested pairs, peak {res.peak_nodes} nodes",
        file=sys.stderr,
    )
    return 0


def _cmd_gen(args) -> int:
    if args.kind == "grid":
        _, mesh = generate_scene(
            "grid",
            rows=args.rows,
            cols=args.cols,
            block=args.block,
            street=args.street,
            height_min=args.height_min,
            height_max=args.height_max,
            ground_divisions=args.ground_divisions,
            seed=args.seed,
        )
    else:
        _, mesh = generate_scene(
            "canyon",
            buildings_per_side=args.buildings_per_side,
            building_w=args.building_w,
            building_d=args.building_d,
            street_width=args.street_width,
            height_min=args.height_min,
            height_max=args.height_max,
            ground_divisions=args.ground_divisions,
            seed=args.seed,
        )
    write_scene(mesh, args.out)
    scene = load_scene(args.out)
    print(
        f"wrote {args.out}: {len(scene.facets)} facets, {len(scene.edges)} edges",
        file=sys.stderr,
    )
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="itrace", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    _add_gen_parser(sub)
    args = ap.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_gen(args)
    except (ConfigError, SceneError, MemoryBudgetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
