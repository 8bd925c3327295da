"""Command-line driver.

Exit codes: 0 ok, 2 configuration error, 3 input error, 4 numerical failure,
5 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checks import CHECKS
from .config import RunConfig
from .errors import ConfigError, DegenerateGeometryError, InputError, NumericalError
from .geometry import normalize_sequence
from .io import load_mesh, load_points
from .keyframe import select_keyframe
from .metrics import DIAGONAL, EDGE, N_SAMPLES, write_reports
from .pipeline import evaluate_sequence, resolve_frames, run_pipeline
from .synth import KINDS, make_scene, write_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
EXIT_CHECK = 5

log = logging.getLogger("deformgrids")


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# ---- run ----------------------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {
        "frames": args.frames, "frames_glob": args.frames_glob, "template": args.template,
        "template_frame": args.template_frame, "output": args.output, "epochs": args.epochs,
        "levels": args.levels, "seed": args.seed, "threads": args.threads, "noise_pct": args.noise_pct,
        "save_grids": args.save_grids, "load_grids": args.load_grids, "gt_meshes": args.gt_meshes,
        "tracks": args.tracks, "precondition_order": args.precondition_order, "log_every": args.log_every,
    }
    if args.no_precondition:
        over["precondition"] = False
    if args.no_multires:
        over["multires"] = False
    if args.no_isometry:
        over["isometry"] = False
    return cfg.with_overrides(**over)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if args.dump_config:
        print(cfg.to_toml(), end="")
        return EXIT_OK
    out = run_pipeline(cfg)
    summary = {
        "output": cfg.output,
        "keyframe": out.manifest["keyframe"]["keyframe"],
        "template_frame": out.manifest["template_frame"],
        "epochs": out.manifest["epochs"],
        "best_loss": out.manifest["best_loss"],
        "active_fraction": out.manifest["parameters"]["fraction"],
        "wall_time_s": out.manifest["wall_time_s"],
    }
    if "metrics" in out.manifest:
        summary["metrics"] = out.manifest["metrics"]
    _emit(summary)
    return EXIT_OK


# ---- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    kw = {"T": args.frames, "n_points": args.points, "seed": args.seed, "fixed_samples": not args.resample}
    if args.kind == "rigid-sphere":
        kw.update(deg_per_frame=args.deg_per_frame, shift_per_frame=args.shift_per_frame)
    elif args.kind == "bending-bar":
        kw.update(max_bend_deg=args.max_bend)
    else:
        kw.update(scale_per_frame=args.scale_per_frame)
    info = write_scene(make_scene(args.kind, **kw), args.out)
    _emit({"out": args.out, "kind": info["kind"], "frames": len(info["frames"]),
           "template_frame": info["template_frame"]})
    return EXIT_OK


# ---- eval ---------------------------------------------------------------------

def _mesh_files(source) -> list[Path]:
    p = Path(source)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".obj", ".ply"))
        if not files:
            raise InputError(f"no .obj or .ply meshes in {p}")
        return files
    if not p.exists():
        raise InputError(f"not found: {p}")
    return [p]


def cmd_eval(args) -> int:
    cfg = RunConfig(eval_samples=args.samples, seed=args.seed, f_basis=args.basis, threads=args.threads)
    pred = [load_mesh(f) for f in _mesh_files(args.pred)]
    gt = [load_mesh(f) for f in _mesh_files(args.gt)]
    tracks = np.load(args.tracks) if args.tracks else None
    if tracks is not None and (len(tracks) != len(pred) or tracks.shape[1:] != pred[0].vertices.shape):
        raise InputError("tracks do not match the predicted meshes")
    with threadpool_limits(limits=args.threads):
        frames = evaluate_sequence(pred, gt, cfg, tracks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = write_reports(frames, out / "metrics.json", out / "metrics.csv")
    _emit(rep["mean"])
    return EXIT_OK


# ---- check --------------------------------------------------------------------

def cmd_check(args) -> int:
    kinds = list(CHECKS) if args.kind == "all" else [args.kind]
    reports = []
    for k in kinds:
        if k == "grad":
            reports.append(CHECKS[k](seed=args.seed, corrupt=args.corrupt))
        else:
            reports.append(CHECKS[k](seed=args.seed))
    passed = all(r["passed"] for r in reports)
    _emit({"passed": passed, "reports": reports}, args.report)
    return EXIT_OK if passed else EXIT_CHECK


# ---- keyframe -----------------------------------------------------------------

def cmd_keyframe(args) -> int:
    cfg = RunConfig(frames=args.frames or [], frames_glob=args.frames_glob or "")
    frames = [load_points(p) for p in resolve_frames(cfg)]
    if len(frames) < 2:
        raise InputError("a sequence needs at least two frames")
    seq, _ = normalize_sequence(frames)
    _emit(select_keyframe(seq).to_dict())
    return EXIT_OK


# ---- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformgrids", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="reconstruct a deforming surface from a point-cloud sequence")
    r.add_argument("--config", help="TOML file; flags override its values")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--frames", nargs="+", help="frame files in temporal order")
    src.add_argument("--frames-glob", help="glob for frame files, sorted lexicographically")
    r.add_argument("--template", help="template mesh (OBJ or PLY) for the template frame")
    r.add_argument("--template-frame", type=int, help="frame the template belongs to (default: selected keyframe)")
    r.add_argument("--output", help="output directory")
    r.add_argument("--epochs", type=int, help="optimization epochs (0 = scale with sequence length)")
    r.add_argument("--levels", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, help="cap on worker threads; results do not depend on it")
    r.add_argument("--noise-pct", type=float, help="Gaussian input noise, percent of bbox diagonal")
    r.add_argument("--precondition-order", choices=["before_adam", "after_adam"])
    r.add_argument("--log-every", type=int)
    r.add_argument("--no-precondition", action="store_true", help="disable grid smoothing (grid lr x0.1)")
    r.add_argument("--no-multires", action="store_true", help="use the finest level only")
    r.add_argument("--no-isometry", action="store_true", help="drop the edge-length term")
    r.add_argument("--save-grids", help="write a grid checkpoint (.npz)")
    r.add_argument("--load-grids", help="start from a grid checkpoint")
    r.add_argument("--gt-meshes", nargs="+", help="ground-truth meshes for evaluation after the run")
    r.add_argument("--tracks", help="ground-truth vertex tracks (.npy) for correspondence error")
    r.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=8, help="index of the last frame (T)")
    s.add_argument("--points", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deg-per-frame", type=float, default=5.0)
    s.add_argument("--shift-per-frame", type=float, default=0.02)
    s.add_argument("--max-bend", type=float, default=45.0, help="bend at the last frame, degrees")
    s.add_argument("--scale-per-frame", type=float, default=1.1)
    s.add_argument("--resample", action="store_true", help="draw fresh surface samples every frame")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score predicted meshes against ground truth")
    e.add_argument("--pred", required=True, help="directory of meshes or a single mesh")
    e.add_argument("--gt", required=True)
    e.add_argument("--tracks", help="ground-truth vertex tracks (.npy)")
    e.add_argument("--out", default="eval")
    e.add_argument("--samples", type=int, default=N_SAMPLES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--basis", choices=[DIAGONAL, EDGE], default=DIAGONAL)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run built-in verification harnesses")
    c.add_argument("kind", choices=["grad", "precond", "interp", "all"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt", action="store_true", help="double one gradient entry (harness sanity)")
    c.add_argument("--report", help="also write the JSON report here")
    c.set_defaults(func=cmd_check)

    k = sub.add_parser("keyframe", help="report keyframe selection for a sequence")
    ksrc = k.add_mutually_exclusive_group(required=True)
    ksrc.add_argument("--frames", nargs="+")
    ksrc.add_argument("--frames-glob")
    k.set_defaults(func=cmd_keyframe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, DegenerateGeometryError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
