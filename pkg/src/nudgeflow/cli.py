"""Command line driver.

Subcommands: mesh (emit mesh files and statistics), run (one scenario),
sweep (vary region/mu/layer), verify (manufactured-solution study), check
(synchronization-condition report only).  Exit codes: 0 success, 2 config
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from . import diagnostics as diag
from . import io as nio
from . import mesh as msh
from . import scenarios as sc
from . import solver as slv


def _add_common(p):
    p.add_argument("--preset", help=f"one of {', '.join(sc.PRESET_NAMES)}")
    p.add_argument("--config", help="path to a configuration file")
    p.add_argument("--desk", action="store_true",
                   help="desk-scale variant of the preset (half resolution)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key")


def _load_config(args) -> sc.ScenarioConfig:
    if bool(args.preset) == bool(args.config):
        raise sc.ConfigError("give exactly one of --preset or --config")
    if args.preset:
        cfg = sc.preset(args.preset, desk=args.desk)
    else:
        cfg = sc.parse_config(Path(args.config).read_text(encoding="utf-8"))
        if args.desk:
            raise sc.ConfigError("--desk applies to presets only")
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise sc.ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    return sc.apply_overrides(cfg, overrides) if overrides else cfg


def _cmd_mesh(args) -> int:
    cfg = _load_config(args)
    setup = sc.build_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nio.write_mesh(out / "coarse.mesh", setup.coarse)
    nio.write_mesh(out / "fine.mesh", setup.fine)
    for name, m in (("coarse", setup.coarse), ("fine", setup.fine)):
        stats = msh.mesh_statistics(m)
        (out / f"{name}_statistics.txt").write_text(stats.as_text() + "\n",
                                                    encoding="utf-8")
        print(f"{name}: {stats.n_vertices} vertices, {stats.n_triangles} "
              f"triangles, h_max {stats.h_max:.4g}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    res = sc.run(cfg, args.out)
    if res.status == 0 and res.histories is not None:
        final = res.histories["da"].final_error()
        print(f"run {cfg.name}: final relative error {final:.3e} "
              f"-> {res.outdir}/errors.csv")
    return res.status


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [v.strip() for v in args.values.split(";") if v.strip()]
    if not values:
        raise sc.ConfigError("empty sweep value list")
    res = sc.sweep(cfg, args.axis, values, args.out)
    print(f"sweep {args.axis} over {values} -> {res.outdir}/combined.csv")
    return res.status


def _cmd_verify(args) -> int:
    cfg = sc.preset("mms")
    if args.overrides:
        cfg = sc.apply_overrides(
            cfg, dict(item.partition("=")[::2] for item in args.overrides)
        )
    res = sc.run(cfg, args.out)
    text = (Path(args.out) / "convergence.txt").read_text(encoding="utf-8")
    print(text)
    return res.status


def _cmd_check(args) -> int:
    cfg = _load_config(args)
    res = sc.check(cfg, args.out)
    print(res.report.as_text())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nudgeflow",
        description="Twin experiments for interior-observation nudging of 2D flow",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="emit mesh files and statistics")
    _add_common(p_mesh)
    p_run = sub.add_parser("run", help="run one scenario twin experiment")
    _add_common(p_run)
    p_sweep = sub.add_parser("sweep", help="vary region, mu, or layer")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=("region", "mu", "layer"))
    p_sweep.add_argument("--values", required=True,
                         help="semicolon-separated values, e.g. '0;1;5;10'")
    p_verify = sub.add_parser("verify", help="manufactured-solution study")
    p_verify.add_argument("--out", default="out")
    p_verify.add_argument("--set", dest="overrides", action="append", default=[],
                          metavar="KEY=VALUE")
    p_check = sub.add_parser("check", help="condition report without time stepping")
    _add_common(p_check)

    args = parser.parse_args(argv)
    handlers = {
        "mesh": _cmd_mesh,
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "verify": _cmd_verify,
        "check": _cmd_check,
    }
    try:
        return handlers[args.command](args)
    except sc.ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (slv.SolveError, msh.MeshError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
