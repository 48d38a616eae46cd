"""Command-line interface: ``phasetopo run|presets|check|mesh-gen``."""

import argparse
import logging
import os
import sys

from .config import GEOMETRIES, PRESET_NOTES, PRESETS, format_config, parse_config, preset_config
from .errors import PhaseTopoError
from .mesh import BOUNDARY_PRESETS, dump_mesh, generate_rect_mesh


def _read_config(path):
    with open(path, "rb") as fh:
        text = fh.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def cmd_run(args):
    config = _read_config(args.config)
    overrides = {}
    if args.strict_energy:
        overrides["strict_energy"] = True
    if args.export_every is not None:
        overrides["export_every"] = args.export_every
    if overrides:
        config = config.with_values(**overrides)
    outdir = args.outdir or config.outdir
    from .driver import run_optimization

    def progress(row):
        print(f"{row.iter:5d}  W={row.energy.total:.10e}  V={row.volume:.6f}  "
              f"phi in [{row.phi_min:.4f}, {row.phi_max:.4f}]  newton={row.newton_iters}",
              flush=True)

    result = run_optimization(config, outdir=outdir, progress=None if args.quiet else progress)
    print(f"status: {result.status}" + (f" ({result.message})" if result.message else ""))
    print(f"outputs written to {outdir}")
    return 0 if result.status == "completed" else 2


def cmd_presets(args):
    for name in sorted(PRESETS):
        print(f"{name}: {PRESET_NOTES[name]}")
        if args.verbose:
            for line in format_config(preset_config(name)).splitlines():
                print(f"    {line}")
    return 0


def cmd_check(args):
    config = _read_config(args.config)
    m = config.model
    print(f"ok: geometry {config.geometry} ({config.nx}x{config.ny}), scheme {m.scheme}, "
          f"tau={m.tau:g}, S0={m.S0:g}, S1={m.S1:g}, n_iter={config.n_iter}, n_phi={m.n_phi}")
    return 0


def cmd_mesh_gen(args):
    if args.preset in PRESETS:
        config = preset_config(args.preset)
        geometry, nx, ny = config.geometry, config.nx, config.ny
    elif args.preset in GEOMETRIES:
        geometry = args.preset
        nx, ny = GEOMETRIES[geometry][2:]
    else:
        raise PhaseTopoError(f"unknown preset {args.preset!r}; choose from "
                             f"{sorted(set(PRESETS) | set(GEOMETRIES))}")
    nx = args.nx or nx
    ny = args.ny or ny
    xr, yr, _, _ = GEOMETRIES[geometry]
    mesh = generate_rect_mesh(xr, yr, nx, ny, BOUNDARY_PRESETS[geometry]())
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_mesh(mesh))
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="phasetopo",
                                description="Phase-field topology optimization of Navier-Stokes flow.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an optimization from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--outdir")
    r.add_argument("--strict-energy", action="store_true",
                   help="abort with status energy_violation if the total energy increases")
    r.add_argument("--export-every", type=int, metavar="K", help="write a VTK snapshot every K iterations")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("presets", help="list built-in benchmark configurations")
    pr.set_defaults(func=cmd_presets)

    c = sub.add_parser("check", help="validate a config file without running")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("mesh-gen", help="write the mesh of a preset or geometry")
    m.add_argument("--preset", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--nx", type=int)
    m.add_argument("--ny", type=int)
    m.set_defaults(func=cmd_mesh_gen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PhaseTopoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
