"""End-to-end reconstruction: load, normalize, pick the keyframe, optimize, export, evaluate."""

from __future__ import annotations

import glob
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig
from .errors import ConfigError, InputError
from .geometry import NormalizationTransform, TriMesh, normalize_sequence
from .grid import GridSequence, build_pruned, deform_points, load_checkpoint, save_checkpoint
from .io import format_obj, load_mesh, load_points
from .keyframe import KeyframeReport, select_keyframe
from .metrics import FrameMetrics, correspondence_error, evaluate_frame, unit_box_transform, write_reports
from .objective import Objective
from .optimizer import RunResult, run

log = logging.getLogger(__name__)


def resolve_frames(cfg: RunConfig, base: Path | None = None) -> list[Path]:
    """Explicit list or lexicographically sorted glob; giving both (or neither) is an error."""
    base = base or Path.cwd()
    if cfg.frames and cfg.frames_glob:
        raise ConfigError("give either an explicit frame list or a glob, not both")
    if cfg.frames:
        return [base / f for f in cfg.frames]
    if not cfg.frames_glob:
        raise ConfigError("no input frames configured")
    pattern = cfg.frames_glob if Path(cfg.frames_glob).is_absolute() else str(base / cfg.frames_glob)
    found = sorted(glob.glob(pattern))
    if not found:
        raise InputError(f"glob {cfg.frames_glob!r} matched no files")
    return [Path(f) for f in found]


def add_noise(frames: list[np.ndarray], pct: float, seed: int) -> list[np.ndarray]:
    """Gaussian noise with per-axis std ``pct`` percent of the joint bounding-box diagonal."""
    if pct <= 0:
        return [f.copy() for f in frames]
    stacked = np.concatenate(frames)
    diag = float(np.linalg.norm(stacked.max(axis=0) - stacked.min(axis=0)))
    rng = np.random.default_rng(seed)
    sigma = pct / 100.0 * diag
    return [f + rng.normal(0.0, sigma, f.shape) for f in frames]


def parameter_counts(grids: GridSequence) -> dict:
    per_level: dict[int, list[int]] = {}
    for g in grids.grids:
        for lv in g.levels:
            c = per_level.setdefault(lv.level, [0, 0])
            c[0] += 6 * len(lv)
            c[1] += 6 * lv.dense_count
    active, dense = grids.n_params(), grids.dense_params()
    return {
        "active": active,
        "dense": dense,
        "fraction": active / dense if dense else 1.0,
        "per_level": {str(l): {"active": a, "dense": d} for l, (a, d) in sorted(per_level.items())},
    }


@dataclass
class Prepared:
    cfg: RunConfig
    frames: list[np.ndarray]
    normalization: NormalizationTransform
    keyframe_report: KeyframeReport
    host_frame: int
    template: TriMesh
    grids: GridSequence


def prepare(cfg: RunConfig, base: Path | None = None) -> Prepared:
    paths = resolve_frames(cfg, base)
    if len(paths) < 2:
        raise InputError("a sequence needs at least two frames")
    raw = [load_points(p) for p in paths]
    raw = add_noise(raw, cfg.noise_pct, cfg.seed)
    seq, tf = normalize_sequence(raw)
    report = select_keyframe(seq, cfg.keyframe_resolution, cfg.keyframe_gamma)
    if not cfg.template:
        raise ConfigError("a template mesh is required")
    mesh = load_mesh((base or Path.cwd()) / cfg.template)
    host = report.keyframe if cfg.template_frame < 0 else cfg.template_frame
    if not 0 <= host < len(seq):
        raise ConfigError(f"template_frame {host} outside the sequence")
    if host != report.keyframe:
        log.warning("template belongs to frame %d but frame %d was selected as keyframe; "
                    "deforming outward from frame %d", host, report.keyframe, host)
    template = mesh.with_vertices(tf.apply(mesh.vertices))
    if cfg.load_grids:
        grids = load_checkpoint((base or Path.cwd()) / cfg.load_grids)
        if grids.n_frames != len(seq) or grids.keyframe != host:
            raise InputError("checkpoint does not match the sequence length or template frame")
    else:
        grids = build_pruned(cfg.levels, seq.frames, host, levels=cfg.grid_levels(), prune=cfg.prune)
    return Prepared(cfg, seq.frames, tf, report, host, template, grids)


@dataclass
class RunOutcome:
    result: RunResult
    prepared: Prepared
    meshes: list[TriMesh]
    manifest: dict
    metrics: list[FrameMetrics] | None


def export_meshes(prep: Prepared, res: RunResult) -> list[TriMesh]:
    out = []
    for t in range(len(prep.frames)):
        v = deform_points(res.grids, res.vertices, t)
        out.append(TriMesh(prep.normalization.invert(v), prep.template.triangles))
    return out


def evaluate_sequence(pred: list[TriMesh], gt: list[TriMesh], cfg: RunConfig, tracks=None) -> list[FrameMetrics]:
    if len(pred) != len(gt):
        raise InputError(f"{len(pred)} predicted frames but {len(gt)} ground-truth meshes")
    out = []
    for t, (p, g) in enumerate(zip(pred, gt)):
        m = evaluate_frame(p, g, cfg.eval_samples, cfg.seed, tuple(cfg.thresholds), cfg.f_basis, cfg.threads)
        if tracks is not None:
            scale = unit_box_transform(g.vertices).scale
            m.corr = correspondence_error(p.vertices[None], tracks[t][None], scale)
        out.append(m)
    return out


def run_pipeline(cfg: RunConfig, base: Path | None = None, write: bool = True) -> RunOutcome:
    t0 = time.perf_counter()
    base = base or Path.cwd()
    with threadpool_limits(limits=cfg.threads):
        prep = prepare(cfg, base)
        obj = Objective(prep.frames, prep.host_frame, prep.template.edges, cfg.alpha, cfg.w_isometry,
                        use_isometry=cfg.isometry, workers=cfg.threads)
        sched = cfg.schedule(len(prep.frames))
        out_dir = base / cfg.output
        if write:
            (out_dir / "meshes").mkdir(parents=True, exist_ok=True)
        res = run(obj, prep.template, prep.grids, sched)
        meshes = export_meshes(prep, res)
        metrics = None
        if cfg.gt_meshes:
            gt = [load_mesh(base / p) for p in cfg.gt_meshes]
            tracks = np.load(base / cfg.tracks) if cfg.tracks else None
            if tracks is not None and tracks.shape[1:] != prep.template.vertices.shape:
                raise InputError("tracks do not match the template vertex count")
            metrics = evaluate_sequence(meshes, gt, cfg, tracks)
    wall = time.perf_counter() - t0
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "epochs": sched.epochs,
        "keyframe": prep.keyframe_report.to_dict(),
        "template_frame": prep.host_frame,
        "normalization": prep.normalization.to_dict(),
        "parameters": parameter_counts(prep.grids),
        "best_epoch": res.best_epoch,
        "best_loss": res.best_loss,
        "final_loss": res.final.to_dict() if res.final else None,
        "wall_time_s": wall,
    }
    if write:
        for t, m in enumerate(meshes):
            (out_dir / "meshes" / f"frame_{t:04d}.obj").write_text(format_obj(m.vertices, m.triangles))
        with open(out_dir / "history.jsonl", "w") as fh:
            for row in res.history:
                fh.write(json.dumps(row) + "\n")
        if cfg.save_grids:
            save_checkpoint(base / cfg.save_grids, res.grids)
        if metrics is not None:
            rep = write_reports(metrics, out_dir / "metrics.json", out_dir / "metrics.csv")
            manifest["metrics"] = rep["mean"]
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return RunOutcome(res, prep, meshes, manifest, metrics)
