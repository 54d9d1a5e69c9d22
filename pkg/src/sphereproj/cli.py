"""Command-line interface.

Exit codes: 0 success, 1 failed gradient check, 2 I/O failure, 3 invalid
configuration, 4 data-quality rejection. Every run prints its resolved
configuration as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import EmptyMesh, EmptySet, InvalidNside, SizeMismatch, SurfaceVanished
from .grid import SdfGrid, read_grid, sphere_sdf, torus_sdf, write_grid
from .mcubes import marching_cubes
from .mesh import TriangleMesh, icosphere, is_obj, read_obj, read_obj_vertices, torus_mesh, write_obj
from .metrics import DEFAULT_JSD_RES, DEFAULT_NPOINTS, mmd_cov_from_matrix, jsd, pairwise, read_xyz, \
    sample_surface
from .project import DEFAULT_BACKGROUND, DEFAULT_DELTA, ProjectionConfig, full_projection, \
    resolve_channels, write_sphmap
from .raycast import DEFAULT_K, DEFAULT_RADIUS, set_threads
from .sphere import healpix_grid

EXIT_OK, EXIT_GRADCHECK, EXIT_IO, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class DataQualityError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not (v >= 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _channels(spec):
    try:
        return resolve_channels(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_mesh(path) -> TriangleMesh:
    try:
        return read_obj(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read mesh {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_project(args):
    channels = _channels(args.channels)
    grid = healpix_grid(args.nside)
    mesh = _load_mesh(args.mesh)
    cfg = ProjectionConfig(args.k, args.r, args.delta, args.background, channels)
    smap = full_projection(mesh, grid, cfg)
    write_sphmap(args.out, smap)
    return EXIT_OK


def cmd_mcubes(args):
    grid = read_grid(args.grid)
    mesh = marching_cubes(grid, args.iso)
    if mesh.is_empty():
        print(f"warning: no isosurface at iso={args.iso}; writing an empty mesh", file=sys.stderr)
    write_obj(args.out, mesh)
    return EXIT_OK


def cmd_synth(args):
    """Analytic shapes as an SDF grid (``.sdfgrid``) or a triangle mesh (``.obj``)."""
    if args.shape == "sphere":
        fn, mesh = sphere_sdf(args.radius), (lambda: icosphere(5, args.radius))
    else:
        fn, mesh = torus_sdf(args.major, args.minor), (lambda: torus_mesh(args.major, args.minor, 96, 48))
    if str(args.out).endswith(".obj"):
        write_obj(args.out, mesh())
    else:
        write_grid(args.out, SdfGrid.from_function(fn, args.resolution))
    return EXIT_OK


def _optim_config(args):
    from .optimize import OptimConfig

    feats = _channels(args.features)
    try:
        return OptimConfig(features=feats, iterations=args.iters, step_size=args.step, seed=args.seed,
                           k=args.k, r=args.r, delta=args.delta, omega=args.omega, nside=args.nside,
                           halving=args.halving, metric_points=args.npoints)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_optimize(args):
    from .optimize import run_optimization

    cfg = _optim_config(args)
    init = read_grid(args.init_grid)
    cfg = replace(cfg, grid_resolution=init.resolution)
    target = _load_mesh(args.target_mesh)
    sphere = healpix_grid(cfg.nside)
    try:
        final, trace = run_optimization(init, target, sphere, cfg)
    except SurfaceVanished as exc:
        if exc.trace is not None and len(exc.trace):
            exc.trace.write_csv(args.out_trace)
        raise DataQualityError(str(exc)) from exc
    trace.write_csv(args.out_trace)
    if args.out_grid:
        write_grid(args.out_grid, final)
    return EXIT_OK


def cmd_ablation(args):
    from .optimize import ABLATION_FEATURES, OptimTask, ablation_table

    cfg = _optim_config(args)
    init = read_grid(args.init_grid)
    target = _load_mesh(args.target_mesh)
    task = OptimTask(init, target, healpix_grid(cfg.nside), replace(cfg, grid_resolution=init.resolution))
    sets = args.sets.split(",") if args.sets else list(ABLATION_FEATURES)
    for s in sets:
        if s not in ABLATION_FEATURES:
            raise ConfigError(f"unknown feature set {s!r}; choose from {list(ABLATION_FEATURES)}")
    checkpoints = tuple(int(c) for c in args.checkpoints.split(","))
    table = ablation_table(task, [ABLATION_FEATURES[s] for s in sets], checkpoints)
    table.write_csv(args.out)
    return EXIT_OK


def _load_set(directory, npoints, seed):
    d = Path(directory)
    if not d.is_dir():
        raise OSError(f"{directory} is not a directory")
    clouds = []
    for f in sorted(d.iterdir()):
        if f.suffix.lower() == ".xyz":
            clouds.append(read_xyz(f))
        elif is_obj(f):
            mesh = read_obj(f)
            if mesh.n_faces:
                clouds.append(sample_surface(mesh, npoints, seed=seed))
            else:
                clouds.append(read_obj_vertices(f))
    if not clouds:
        raise EmptySet(f"no .obj or .xyz shapes in {directory}")
    return clouds


def cmd_metrics(args):
    gen = _load_set(args.set_a, args.npoints, args.seed)
    test = _load_set(args.set_b, args.npoints, args.seed)
    report = {"n_a": len(gen), "n_b": len(test), "npoints": args.npoints, "jsd_res": args.jsd_res}
    metrics = ["cd", "emd"] if args.metric == "both" else [args.metric]
    for m in metrics:
        mmd, cov = mmd_cov_from_matrix(pairwise(gen, test, m))
        report[f"mmd_{m}"] = mmd
        report[f"cov_{m}"] = cov
    report["jsd"] = jsd(gen, test, args.jsd_res)
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import gradient_check

    mesh = _load_mesh(args.mesh)
    cfg = ProjectionConfig(args.k, args.r, args.delta, DEFAULT_BACKGROUND, "all")
    report = gradient_check(mesh, healpix_grid(args.nside), args.samples, args.tol, seed=args.seed,
                            config=cfg)
    out = report.as_dict()
    print(json.dumps(out, sort_keys=True, default=float))
    print("gradcheck " + ("PASS" if report.passed else "FAIL") + f" max_rel_err={report.worst:.3e}"
          f" skipped_faces={report.skipped_faces}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_sdfsample(args):
    from .sdfdata import inside_fraction, inside_fraction_filter, sample_training_points, write_samples

    mesh = _load_mesh(args.mesh)
    samples = sample_training_points(mesh, args.nnear, args.nuniform, (args.sigma1, args.sigma2),
                                     args.seed, args.offset, args.views)
    if not inside_fraction_filter(samples, args.threshold):
        raise DataQualityError(f"inside fraction {inside_fraction(samples):.4f} below {args.threshold}")
    write_samples(args.out, samples)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_projection_flags(p, k=DEFAULT_K):
    p.add_argument("--k", type=_positive_int, default=k, help="hits kept per ray")
    p.add_argument("--r", type=_nonneg_float, default=DEFAULT_RADIUS, help="near-miss radius")
    p.add_argument("--delta", type=_positive_float, default=DEFAULT_DELTA, help="silhouette decay")
    p.add_argument("--nside", type=_positive_int, default=32, help="HEALPix nside (power of two)")


def _add_optim_flags(p):
    from .optimize import OPTIM_K, OptimConfig

    d = OptimConfig()
    _add_projection_flags(p, k=OPTIM_K)
    p.add_argument("--features", default="default", help="channel list, 'default' or 'all'")
    p.add_argument("--iters", type=_positive_int, default=d.iterations)
    p.add_argument("--step", type=_nonneg_float, default=d.step_size)
    p.add_argument("--omega", type=_positive_float, default=d.omega)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--halving", action="store_true", help="halve the step whenever the loss rises")
    p.add_argument("--npoints", type=_positive_int, default=DEFAULT_NPOINTS, help="metric samples")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sphereproj", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=_positive_int, default=1,
                    help="worker threads; 1 gives bit-exact reproducibility")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("project", help="mesh -> .sphmap")
    p.add_argument("mesh")
    p.add_argument("out")
    _add_projection_flags(p)
    p.add_argument("--channels", default="default", help="'default', 'all' or a comma list")
    p.add_argument("--background", type=_positive_float, default=DEFAULT_BACKGROUND)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("mcubes", help="SDFGRID -> OBJ")
    p.add_argument("grid")
    p.add_argument("out")
    p.add_argument("--iso", type=float, default=0.0)
    p.set_defaults(func=cmd_mcubes)

    p = sub.add_parser("synth", help="write an analytic sphere or torus as SDFGRID or OBJ")
    p.add_argument("shape", choices=["sphere", "torus"])
    p.add_argument("out")
    p.add_argument("--radius", type=_positive_float, default=0.45)
    p.add_argument("--major", type=_positive_float, default=0.5)
    p.add_argument("--minor", type=_positive_float, default=0.2)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="fit grid values to a target mesh's spherical maps")
    p.add_argument("init_grid")
    p.add_argument("target_mesh")
    p.add_argument("out_trace")
    p.add_argument("--out-grid", default=None)
    _add_optim_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("ablation", help="CD/EMD per feature set at checkpoints")
    p.add_argument("init_grid")
    p.add_argument("target_mesh")
    p.add_argument("out")
    p.add_argument("--sets", default=None, help="comma list of feature-set names")
    p.add_argument("--checkpoints", default="5,10,30")
    _add_optim_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("metrics", help="MMD/COV/JSD between two directories of shapes")
    p.add_argument("set_a")
    p.add_argument("set_b")
    p.add_argument("--metric", choices=["cd", "emd", "both"], default="both")
    p.add_argument("--npoints", type=_positive_int, default=DEFAULT_NPOINTS)
    p.add_argument("--jsd-res", type=_positive_int, default=DEFAULT_JSD_RES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("mesh")
    p.add_argument("--samples", type=_positive_int, default=100)
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    _add_projection_flags(p)
    p.set_defaults(func=cmd_gradcheck, nside=8)

    p = sub.add_parser("sdfsample", help="mesh -> SDFSAMPLES training points")
    p.add_argument("mesh")
    p.add_argument("out")
    p.add_argument("--nnear", type=int, default=9500)
    p.add_argument("--nuniform", type=int, default=500)
    p.add_argument("--views", type=_positive_int, default=50)
    p.add_argument("--offset", type=float, default=2e-3)
    p.add_argument("--sigma1", type=_positive_float, default=0.005)
    p.add_argument("--sigma2", type=_positive_float, default=0.0005)
    p.add_argument("--threshold", type=_nonneg_float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sdfsample)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps(resolved, sort_keys=True), file=sys.stderr)
    set_threads(args.threads)
    try:
        return args.func(args)
    except DataQualityError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, InvalidNside, SizeMismatch, EmptySet) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyMesh as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
