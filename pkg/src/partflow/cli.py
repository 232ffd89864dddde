"""Command-line interface: generate, reconstruct, evaluate, export."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .camera import Box
from .ipalm import StepFailure
from .metrics import flow_metrics, particle_metrics
from .motionfield import MotionGrid
from .pipeline import SolverConfig, reconstruct, reconstruct_sequential
from .synth import AnalyticFlow, generate

log = logging.getLogger("partflow")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _triple(text, kind=float):
    parts = text.replace("x", ",").split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three values, got {text!r}")
    return tuple(kind(v) for v in parts)


def _pair(text, kind=int):
    parts = text.replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values, got {text!r}")
    return tuple(kind(v) for v in parts)


def _eps(text):
    lo, sep, hi = text.partition(":")
    try:
        return (float(lo), float(hi if sep else lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}") from None


def _div(text):
    mode, _, alpha = text.partition(":")
    if mode not in ("hard", "soft"):
        raise argparse.ArgumentTypeError("expected hard or soft:ALPHA")
    try:
        return mode, float(alpha) if alpha else 0.0
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha in {text!r}") from None


# generate ----------------------------------------------------------------------
def cmd_generate(args):
    box = Box.from_extent(args.volume)
    flow = AnalyticFlow.parse(args.flow, box.extent)
    scene = generate(flow, args.ppp, args.size, box, sigma=args.sigma, noise=args.noise,
                     seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for t in range(2):
        row = []
        for k in range(len(scene.cameras)):
            name = f"t{t}_cam{k}.pfm"
            io.save_pfm(out / name, scene.images[t, k])
            row.append(name)
        images.append(row)
    cams = []
    for k, cam in enumerate(scene.cameras):
        io.save_camera(out / f"cam{k}.json", cam)
        cams.append(f"cam{k}.json")
    io.save_particles(out / "truth_t0.csv", scene.particles_t0)
    io.save_particles(out / "truth_t1.csv", scene.particles_t1)
    spacing = args.truth_spacing
    io.save_flow(out / "truth_flow.bin", scene.truth_grid(spacing))
    manifest = io.Manifest(images, cams, list(box.extent), args.sigma,
                           {"particles": "truth_t0.csv", "particles_t1": "truth_t1.csv",
                            "flow": "truth_flow.bin"},
                           {"flow": flow.to_dict(), "ppp": args.ppp, "seed": args.seed,
                            "noise": args.noise, "size": list(args.size)})
    manifest.save(out / "manifest.json")
    print(f"wrote {len(scene.particles_t0)} particles, {2 * len(cams)} images to {out}")
    return EXIT_OK


# reconstruct -------------------------------------------------------------------
_FLAG_KEYS = {"lam": "lam", "mu": "mu", "levels": "levels", "factor": "factor",
              "grid_subsample": "grid_subsample", "norm": "sparsity", "i_min": "i_min",
              "max_iters": "max_iters", "sigma": "sigma", "output_spacing": "output_spacing"}


def build_config(args):
    """Defaults, then the JSON config file, then explicitly given flags."""
    known = {f.name for f in fields(SolverConfig)}
    values = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
        unknown = set(data) - known - {"sequential"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update({k: v for k, v in data.items() if k in known})
        if data.get("sequential"):
            args.sequential = True
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    if args.eps is not None:
        values["eps_start"], values["eps_end"] = args.eps
    if args.div is not None:
        values["divergence"], values["alpha"] = args.div
    try:
        return SolverConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _set_threads(n):
    if n is None:
        return
    import numba
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def cmd_reconstruct(args):
    manifest = io.Manifest.load(args.manifest).validate()
    config = build_config(args)
    _set_threads(args.threads)
    images, cameras = manifest.load_images(), manifest.load_cameras()
    run = reconstruct_sequential if args.sequential else reconstruct
    particles, grid, report = run(images, cameras, manifest.box, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_particles(out / "particles.csv", particles)
    io.save_flow(out / "flow.bin", grid)
    doc = report.to_dict()
    doc["manifest"] = str(Path(args.manifest).resolve())
    doc["sequential"] = bool(args.sequential)
    (out / "report.json").write_text(json.dumps(doc, indent=2, default=float) + "\n")
    (out / "energies.csv").write_text(report.energies_csv())
    for w in report.warnings:
        log.warning(w)
    print(f"{len(particles)} particles, flow grid {tuple(grid.dims)}, {report.seconds:.1f} s")
    return EXIT_OK


# evaluate ----------------------------------------------------------------------
def cmd_evaluate(args):
    result = {}
    if args.flow:
        est = io.load_flow(args.flow)
        truth = io.load_flow(args.truth_flow)
        if tuple(est.dims) != tuple(truth.dims):
            raise UsageError(f"flow dims differ: {tuple(est.dims)} vs {tuple(truth.dims)}")
        result.update(flow_metrics(est, truth).to_dict())
    if args.particles:
        pm = particle_metrics(io.load_particles(args.particles),
                              io.load_particles(args.truth_particles), args.threshold)
        result.update(pm.to_dict())
    if not result:
        raise UsageError("nothing to evaluate: give --flow and/or --particles")
    width = max(map(len, result))
    for k, v in result.items():
        print(f"{k:<{width}}  {v}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


# export ------------------------------------------------------------------------
def flow_slice(grid: MotionGrid, index, component):
    """(N, M) image of one component (or magnitude) at z-vertex ``index``; [i, j] = vertex (i, j, index)."""
    if not 0 <= index < grid.dims[2]:
        raise UsageError(f"slice z={index} outside 0..{grid.dims[2] - 1}")
    sl = grid.coeffs[:, :, index]
    if component == "mag":
        return np.linalg.norm(sl, axis=-1)
    return sl[..., "xyz".index(component)].copy()


def slice_vectors(grid: MotionGrid, index, stride=1):
    """Rows ``x, y, z, u, v, w`` for every ``stride``-th vertex of z-slice ``index``."""
    if not 0 <= index < grid.dims[2]:
        raise UsageError(f"slice z={index} outside 0..{grid.dims[2] - 1}")
    if stride < 1:
        raise UsageError("--stride must be at least 1")
    pos = grid.vertex_positions()[::stride, ::stride, index]
    vec = grid.coeffs[::stride, ::stride, index]
    return np.hstack([pos.reshape(-1, 3), vec.reshape(-1, 3)])


def cmd_export(args):
    grid = io.load_flow(args.flow)
    axis, _, val = args.slice.partition("=")
    if axis != "z" or not val.lstrip("-").isdigit():
        raise UsageError("--slice must look like z=K")
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        rows = slice_vectors(grid, int(val), args.stride)
        np.savetxt(out, rows, delimiter=",", header="x,y,z,u,v,w", comments="", fmt="%.9g")
        print(f"wrote {len(rows)} vectors to {out}")
        return EXIT_OK
    img = flow_slice(grid, int(val), args.component)
    if out.suffix.lower() == ".pgm":
        io.save_pgm16(out, img)
    elif out.suffix.lower() == ".npy":
        np.save(out, img)
    else:
        io.save_pfm(out, img)
    print(f"wrote {img.shape[0]}x{img.shape[1]} slice to {out}")
    return EXIT_OK


# entry point -------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="partflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic two-frame dataset")
    g.add_argument("--flow", default="taylor_green:3",
                   help="uniform:DX,DY,DZ | rotation:OMEGA | shear:RATE | taylor_green:MAXSPEED")
    g.add_argument("--ppp", type=float, default=0.05)
    g.add_argument("--size", type=_pair, default=(300, 160), help="image WIDTH,HEIGHT")
    g.add_argument("--volume", type=_triple, default=(200.0, 100.0, 60.0), help="extent X,Y,Z")
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--truth-spacing", type=float, default=10.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct particles and flow from a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="JSON file with SolverConfig keys (flags take precedence)")
    r.add_argument("--lambda", dest="lam", type=float, help="smoothness weight (0.04)")
    r.add_argument("--mu", type=float, help="sparsity weight (1e-4)")
    r.add_argument("--eps", type=_eps, help="triangulation tolerance schedule START:END (0.8:2.0)")
    r.add_argument("--levels", type=int, help="pyramid levels (10)")
    r.add_argument("--factor", type=float, help="pyramid factor (0.94)")
    r.add_argument("--grid-subsample", dest="grid_subsample", type=float,
                   help="finest lattice pitch in voxels (10)")
    r.add_argument("--div", type=_div, help="hard | soft:ALPHA (hard)")
    r.add_argument("--norm", choices=("l0", "l1"), help="sparsity norm (l0)")
    r.add_argument("--i-min", dest="i_min", type=float, help="peak detection threshold (0.1)")
    r.add_argument("--max-iters", dest="max_iters", type=int, help="iPALM iterations per level (40)")
    r.add_argument("--sigma", type=float, help="particle blob size in the images (1.0)")
    r.add_argument("--output-spacing", dest="output_spacing", type=float,
                   help="lattice pitch of the delivered flow (finest working lattice)")
    r.add_argument("--sequential", action="store_true", help="two-stage baseline")
    r.add_argument("--threads", type=int, default=os.cpu_count())
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="compare estimates with ground truth")
    e.add_argument("--flow")
    e.add_argument("--truth-flow")
    e.add_argument("--particles")
    e.add_argument("--truth-particles")
    e.add_argument("--threshold", type=float, default=1.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", help="write a flow slice as an image or a vector table")
    x.add_argument("flow")
    x.add_argument("--slice", required=True, help="z=K")
    x.add_argument("--component", choices=("x", "y", "z", "mag"), default="x")
    x.add_argument("--stride", type=int, default=1, help="vertex subsampling for .csv vector output")
    x.add_argument("--out", required=True, help=".pfm, .pgm or .npy image; .csv for vectors")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate":
        if bool(args.flow) != bool(args.truth_flow) or bool(args.particles) != bool(args.truth_particles):
            parser.error("estimate and truth must be given together")
    try:
        return args.func(args)
    except (UsageError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StepFailure, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
