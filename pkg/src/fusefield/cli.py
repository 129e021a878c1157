"""One-binary command line: synth, fuse, train, render, eval, query, explore.

Every command reads one validated JSON config (``--config``, with
``--set key=value`` dotted overrides), draws all randomness from a single
seed, and writes deterministic artifacts: identical inputs and seed produce
byte-identical outputs.  Failures exit nonzero with a one-line
``E_<CODE>: message`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    config_camera,
    config_grid,
    config_policy,
    config_scene,
    config_train,
    create_model,
    load_config,
)
from .errors import ConfigError, FuseFieldError
from .field import LOGVAR_MAX, LOGVAR_MIN, decode_batch
from .formats import CHECKPOINT_MAGIC, load_arrays, save_arrays, save_csv, save_pgm, save_ppm
from .fusion import fuse_frames, load_fusion_state, merge_states, save_fusion_state
from .geometry import look_at
from .meshing import extract_mesh, reconstruction_metrics, save_mesh
from .metrics import uncertainty_report
from .render import render_image
from .scene import (
    ground_truth_tsdf,
    load_frames,
    orbit_poses,
    render_frame,
    save_frames,
    save_scene,
    scene_sdf,
)
from .search import class_centroid, episode_to_dict, exploit_target, run_episode
from .semantic import (
    combine_similarity,
    contrastive_volume,
    normalize_uncertainty,
    query_for_class,
    similarity_volume,
    surface_project,
    uncertainty_volume,
)
from .train import ModelParams, SceneData, fit
from .volume import VoxelVolume, save_volume


def _mkdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _bounds_centroid(scene) -> np.ndarray:
    return 0.5 * (np.asarray(scene.bounds_lo) + np.asarray(scene.bounds_hi))


def trajectory_poses(scene, cfg: dict):
    """Camera poses for the configured trajectory, all looking at the scene."""
    traj = cfg["trajectory"]
    center = _bounds_centroid(scene)
    n = traj["n_frames"]
    if n < 0:
        raise ConfigError("trajectory.n_frames must be non-negative")
    if traj["kind"] == "orbit":
        return orbit_poses(center, traj["radius"], traj["height"], n,
                           traj["start_angle"]) if n else []
    if traj["kind"] == "random":
        rng = np.random.default_rng(cfg["seed"])
        lo = np.asarray(scene.bounds_lo)
        hi = np.asarray(scene.bounds_hi)
        poses = []
        while len(poses) < n:
            pos = rng.uniform(lo, hi)
            if scene_sdf(scene, pos)[0] <= 0.05:
                continue  # inside or touching a solid; draw again
            if np.linalg.norm(center - pos) < 1e-6:
                continue
            poses.append(look_at(pos, center))
        return poses
    raise ConfigError(f"unknown trajectory kind {traj['kind']!r}")


def _load_model(cfg: dict, scene, checkpoint: str = None) -> ModelParams:
    if checkpoint:
        return ModelParams.load(checkpoint)
    return create_model(cfg, scene)


def _fused_surface_volume(state) -> VoxelVolume:
    """Fused TSDF with the free-space prior (+1) in unobserved voxels."""
    data = np.where(state.tsdf_weight.data > 0, state.tsdf.data, 1.0)
    return VoxelVolume(state.grid, data)


# ---------------------------------------------------------------------------
# Subcommands.  Each returns 0 on success and prints one summary line.


def cmd_synth(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    intr = config_camera(cfg)
    out = _mkdir(args.out)
    poses = trajectory_poses(scene, cfg)
    frames = [render_frame(scene, pose, intr) for pose in poses]
    save_frames(os.path.join(out, "frames.ffr"), frames)
    save_scene(os.path.join(out, "scene.json"), scene)
    print(f"synth: wrote {len(frames)} frames to {out}")
    return 0


def cmd_fuse(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    grid = config_grid(cfg)
    trunc = cfg["fusion"]["trunc"]
    encoder = _load_model(cfg, scene, args.checkpoint).encoder
    frames = load_frames(args.frames)
    state = fuse_frames(grid, frames, encoder, trunc)
    for snapshot in args.merge or ():
        state = merge_states(load_fusion_state(snapshot), state)
    save_fusion_state(args.out, state)
    observed = int(np.count_nonzero(state.tsdf_weight.data))
    print(f"fuse: {len(frames)} frames -> {args.out} ({observed} observed voxels)")
    return 0


def cmd_train(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    grid = config_grid(cfg)
    frames = load_frames(args.frames)
    data = SceneData(scene=scene, frames=frames, grid=grid)
    params = _load_model(cfg, scene, args.checkpoint)
    out = _mkdir(args.out)
    params, history = fit(
        [data], config_train(cfg), params=params, out_dir=out,
        checkpoint_every=cfg["train"]["checkpoint_every"],
    )
    final = history[-1]["total"] if history else float("nan")
    print(f"train: {len(history)} steps, final loss {final:.6g}, artifacts in {out}")
    return 0


def _logvar_image(values: np.ndarray) -> np.ndarray:
    """Log-variances mapped to [0, 1] over their clamp range for PGM output."""
    return (values - LOGVAR_MIN) / (LOGVAR_MAX - LOGVAR_MIN)


def cmd_render(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    grid = config_grid(cfg)
    intr = config_camera(cfg)
    state = load_fusion_state(args.state)
    params = _load_model(cfg, scene, args.checkpoint)
    field = params.build_field(state, cfg["fusion"]["count_cap"])
    if args.frames:
        frames = load_frames(args.frames)
        if not 0 <= args.pose_index < len(frames):
            raise ConfigError(f"pose index {args.pose_index} outside archive")
        pose = frames[args.pose_index].pose
    else:
        poses = trajectory_poses(scene, cfg)
        if not 0 <= args.pose_index < len(poses):
            raise ConfigError(f"pose index {args.pose_index} outside trajectory")
        pose = poses[args.pose_index]
    buffers = render_image(
        field, pose, intr, n_samples=cfg["render"]["n_samples"],
        stride=cfg["render"]["stride"],
    )
    out = _mkdir(args.out)
    # Depth is scaled by the grid diagonal so the image range is input-independent.
    diag = float(np.linalg.norm(np.asarray(grid.dims) * grid.voxel_size))
    save_ppm(os.path.join(out, "rgb.ppm"), buffers.color)
    save_pgm(os.path.join(out, "depth.pgm"), buffers.depth, scale=diag)
    save_pgm(os.path.join(out, "opacity.pgm"), buffers.opacity)
    save_pgm(os.path.join(out, "logvar_color.pgm"), _logvar_image(buffers.logvar_c))
    save_pgm(os.path.join(out, "logvar_feature.pgm"), _logvar_image(buffers.logvar_f))
    save_pgm(os.path.join(out, "logvar_tsdf.pgm"), _logvar_image(buffers.logvar_s))
    named = {
        "color": buffers.color, "feature": buffers.feature, "depth": buffers.depth,
        "logvar_c": buffers.logvar_c, "logvar_f": buffers.logvar_f,
        "logvar_s": buffers.logvar_s, "opacity": buffers.opacity,
    }
    save_arrays(os.path.join(out, "buffers.ffc"), CHECKPOINT_MAGIC, named)
    h, w = buffers.depth.shape
    print(f"render: {w}x{h} buffers written to {out}")
    return 0


REPORT_HEADER = ["channel", "ause_mae", "ause_mse", "ause_rmse", "rho", "p_value",
                 "significant"]


def _report_row(channel: str, errors, uncertainties) -> list:
    report = uncertainty_report(errors, uncertainties)
    return [channel, repr(report.ause_mae), repr(report.ause_mse),
            repr(report.ause_rmse), repr(report.rho), repr(report.p_value),
            report.significant]


def _fixture_rows(path: str) -> list:
    entries = load_arrays(path, CHECKPOINT_MAGIC)
    channels = sorted(
        name[: -len(".errors")] for name in entries if name.endswith(".errors")
    )
    if "errors" in entries:
        channels.insert(0, "")
    if not channels:
        raise ConfigError("fixture has no errors/uncertainties entry pairs")
    rows = []
    for channel in channels:
        ekey = f"{channel}.errors" if channel else "errors"
        ukey = f"{channel}.uncertainties" if channel else "uncertainties"
        if ukey not in entries:
            raise ConfigError(f"fixture entry {ekey} has no matching {ukey}")
        rows.append(_report_row(channel or "all", entries[ekey], entries[ukey]))
    return rows


def cmd_eval(cfg: dict, args) -> int:
    out = _mkdir(args.out)
    report_path = os.path.join(out, "report.csv")
    if args.arrays:
        rows = _fixture_rows(args.arrays)
        save_csv(report_path, REPORT_HEADER, rows)
        print(f"eval: {len(rows)} fixture channels -> {report_path}")
        return 0
    if not (args.state and args.frames):
        raise ConfigError("eval needs either --arrays or --state with --frames")
    scene = config_scene(cfg)
    grid = config_grid(cfg)
    intr = config_camera(cfg)
    trunc = cfg["fusion"]["trunc"]
    state = load_fusion_state(args.state)
    params = _load_model(cfg, scene, args.checkpoint)
    field = params.build_field(state, cfg["fusion"]["count_cap"])

    stride = cfg["render"]["stride"]
    n_samples = cfg["render"]["n_samples"]
    color_err, color_unc, feat_err, feat_unc = [], [], [], []
    for frame in load_frames(args.frames):
        buffers = render_image(field, frame.pose, intr, n_samples=n_samples,
                               stride=stride)
        gt_rgb = frame.rgb[::stride, ::stride]
        gt_feat = frame.teacher_features[::stride, ::stride]
        color_err.append(np.mean(np.abs(buffers.color - gt_rgb), axis=2).ravel())
        color_unc.append(buffers.logvar_c.ravel())
        feat_err.append(np.mean(np.abs(buffers.feature - gt_feat), axis=2).ravel())
        feat_unc.append(buffers.logvar_f.ravel())

    centers = grid.voxel_centers().reshape(-1, 3)
    pred_tsdf, tsdf_logvar, _ = decode_batch(field, centers, "geo")
    gt = ground_truth_tsdf(scene, grid, trunc).data.ravel()
    observed = state.count.data.ravel() > 0
    rows = [
        _report_row("color", np.concatenate(color_err), np.concatenate(color_unc)),
        _report_row("feature", np.concatenate(feat_err), np.concatenate(feat_unc)),
        _report_row("tsdf", np.abs(pred_tsdf.ravel() - gt)[observed],
                    tsdf_logvar[observed]),
    ]
    save_csv(report_path, REPORT_HEADER, rows)

    mesh_pred = extract_mesh(_fused_surface_volume(state))
    mesh_gt = extract_mesh(ground_truth_tsdf(scene, grid, trunc))
    recon = reconstruction_metrics(mesh_pred, mesh_gt, seed=cfg["seed"])
    save_csv(os.path.join(out, "recon.csv"), list(recon),
             [[repr(v) for v in recon.values()]])
    print(f"eval: report.csv and recon.csv written to {out}")
    return 0


def _heat_colors(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] scalars to a blue-to-red ramp for COFF output."""
    v = np.clip(values, 0.0, 1.0)[:, None]
    return np.hstack([v, 0.2 * np.ones_like(v), 1.0 - v])


def cmd_query(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    state = load_fusion_state(args.state)
    params = _load_model(cfg, scene, args.checkpoint)
    field = params.build_field(state, cfg["fusion"]["count_cap"])
    spec = query_for_class(scene, cfg["query"]["class_id"],
                           cfg["query"]["temperature"])
    out = _mkdir(args.out)
    save_volume(os.path.join(out, "similarity.ffv"),
                similarity_volume(field, spec.positive))
    contrast = contrastive_volume(field, spec)
    weight = VoxelVolume(field.grid, normalize_uncertainty(
        uncertainty_volume(field, "geo").data, "minmax"))
    combined = combine_similarity(contrast, [weight], "spatial_only")
    mesh = extract_mesh(_fused_surface_volume(state))
    vertex_score = surface_project(combined, mesh) if not mesh.is_empty else None
    save_mesh(os.path.join(out, "mesh.off"), mesh,
              colors=None if vertex_score is None else _heat_colors(vertex_score))
    estimate = exploit_target(field, spec)
    doc = {"class_id": cfg["query"]["class_id"], "estimate": estimate.tolist()}
    with open(os.path.join(out, "query.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"query: class {doc['class_id']} estimate {estimate.round(4).tolist()}"
          f" -> {out}")
    return 0


def cmd_explore(cfg: dict, args) -> int:
    scene = config_scene(cfg)
    grid = config_grid(cfg)
    intr = config_camera(cfg)
    params = _load_model(cfg, scene, args.checkpoint)
    spec = query_for_class(scene, cfg["query"]["class_id"],
                           cfg["query"]["temperature"])
    target = class_centroid(scene, cfg["query"]["class_id"])
    log = run_episode(
        scene, spec, target, config_policy(cfg), params, grid, intr,
        trunc=cfg["fusion"]["trunc"], count_cap=cfg["fusion"]["count_cap"],
        lookat_policy=args.lookat_policy,
    )
    out = _mkdir(args.out)
    with open(os.path.join(out, "episode.json"), "w", encoding="utf-8") as fh:
        json.dump(episode_to_dict(log), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"explore: success={log.success} estimate {log.estimate.round(4).tolist()}"
          f" after {log.steps} steps -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and process entry.


def _apply_threads(threads: int) -> None:
    if threads < 0:
        raise ConfigError("--threads must be non-negative")
    if threads:
        # Cap numba's worker pool; --threads 1 is the deterministic reference.
        # (Our kernels are serial, so this only constrains library internals.)
        try:
            import warnings

            import numba

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                numba.set_num_threads(threads)
        except ImportError:
            pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. grid.voxel_size=0.1")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--threads", type=int, default=0,
                        help="cap worker threads (1 = deterministic reference)")

    parser = argparse.ArgumentParser(
        prog="fusefield",
        description="Uncertainty-aware incremental feature fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="render a synthetic trajectory into a frame archive")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", parents=[common],
                       help="fuse a frame archive into a state snapshot")
    p.add_argument("--frames", required=True, help="frame archive (.ffr)")
    p.add_argument("--out", required=True, help="fusion snapshot path (.ffs)")
    p.add_argument("--checkpoint", default=None, help="encoder checkpoint (.ffc)")
    p.add_argument("--merge", action="append", default=[], metavar="SNAPSHOT",
                   help="existing snapshot(s) to merge with the fused frames")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", parents=[common],
                       help="fit the model on a frame archive")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--checkpoint", default=None, help="initial weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common],
                       help="render images and buffers from a fused state")
    p.add_argument("--state", required=True, help="fusion snapshot (.ffs)")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--frames", default=None,
                   help="take the pose from this archive instead of the trajectory")
    p.add_argument("--pose-index", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common],
                       help="uncertainty ranking report and reconstruction metrics")
    p.add_argument("--out", required=True)
    p.add_argument("--arrays", default=None,
                   help="fixture container with errors/uncertainties entries")
    p.add_argument("--state", default=None)
    p.add_argument("--frames", default=None, help="held-out frame archive")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", parents=[common],
                       help="semantic similarity volume and heat-colored mesh")
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("explore", parents=[common],
                       help="run one active-search episode")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--lookat-policy", choices=["uncertainty", "random"],
                   default="uncertainty")
    p.set_defaults(func=cmd_explore)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        _apply_threads(args.threads)
        return args.func(cfg, args)
    except FuseFieldError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - safety net
        print(f"E_INTERNAL: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
