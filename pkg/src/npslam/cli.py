"""Command-line entry points.

Subcommands: synth (write a synthetic TUM-layout sequence), run (full SLAM),
render (re-render a frame from a checkpoint), mesh (fuse + extract from a
checkpoint and trajectory), evaluate (trajectory / mesh metrics), inspect
(checkpoint summary).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import datasets, evaluation
from .checkpoint import load_checkpoint
from .config import load_config
from .datasets import (BoxObstacle, Sphere, SyntheticSceneSpec,
                       generate_synthetic, load_tum, lawnmower_trajectory,
                       orbit_trajectory, sample_surface, save_tum)
from .geometry import CameraIntrinsics, Pose
from .meshing import mesh_from_trajectory, write_ply
from .pipeline import run_slam
from .pointcloud import DynamicRadiusConfig
from .renderer import render_frame, write_pgm16, write_ppm

log = logging.getLogger(__name__)


def _intrinsics_for(resolution: str) -> CameraIntrinsics:
    try:
        w, h = (int(x) for x in resolution.lower().split("x"))
    except ValueError:
        raise SystemExit(f"bad --resolution {resolution!r}, expected WxH")
    return CameraIntrinsics(fx=0.75 * w, fy=0.75 * w, cx=w / 2.0, cy=h / 2.0,
                            width=w, height=h)


def scene_preset(name: str) -> tuple[SyntheticSceneSpec, str]:
    """Named scene + default trajectory kind."""
    if name == "room":
        spec = SyntheticSceneSpec(
            room_lo=(0.0, 0.0, 0.0), room_hi=(4.0, 3.0, 2.5),
            spheres=[Sphere((2.6, 2.2, 0.9), 0.35, (1.0, 0.75, 0.75))],
            boxes=[BoxObstacle((0.8, 1.9, 0.0), (1.5, 2.5, 0.8),
                               (0.75, 0.85, 1.0))])
        return spec, "orbit"
    if name == "hfroom":  # fine texture for feature-transform studies
        spec, traj = scene_preset("room")
        spec.checker_period = 0.12
        return spec, traj
    if name == "sphere":
        spec = SyntheticSceneSpec(room_lo=None, room_hi=None,
                                  spheres=[Sphere((0.0, 0.0, 1.0), 0.5)],
                                  min_hit_fraction=0.6)
        return spec, "sphere-orbit"
    raise SystemExit(f"unknown --preset {name!r} (room, hfroom, sphere)")


def preset_trajectory(kind: str, n_frames: int) -> list[Pose]:
    if kind == "orbit":
        return orbit_trajectory(center=(2.0, 1.5, 1.25), radius=0.9,
                                height=1.3, n_frames=n_frames)
    if kind == "sphere-orbit":
        return orbit_trajectory(center=(0.0, 0.0, 1.0), radius=1.0,
                                height=1.0, n_frames=n_frames)
    if kind == "lawnmower":
        return lawnmower_trajectory(start=(1.2, 0.8, 1.2), row_len=1.6,
                                    n_rows=4, row_gap=0.25,
                                    n_frames=n_frames)
    raise SystemExit(f"unknown trajectory {kind!r}")


def cmd_synth(args) -> int:
    spec, traj_kind = scene_preset(args.preset)
    if args.trajectory:
        traj_kind = args.trajectory
    if args.noise > 0:
        spec.noise_sigma = args.noise
    rng = np.random.default_rng(args.seed)
    if args.exposure:
        lo, hi = (float(x) for x in args.exposure.split(","))
        spec.exposure_gains = [float(g) for g in
                               rng.uniform(lo, hi, size=args.frames)]
    K = _intrinsics_for(args.resolution)
    poses = preset_trajectory(traj_kind, args.frames)
    seq = generate_synthetic(spec, K, poses, rng, name=args.preset)
    save_tum(args.output, seq)
    print(f"wrote {len(seq)} frames to {args.output}")
    return 0


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.output is not None:
        overrides["run.output_dir"] = args.output
    if args.no_exposure:
        overrides["decoders.use_exposure"] = False
    if args.no_ftheta:
        overrides["decoders.use_feature_transform"] = False
    if args.gt_pose:
        overrides["run.use_gt_poses"] = True
    cfg = load_config(args.config, profile=args.profile, overrides=overrides)
    if args.data:
        cfg.dataset_path = args.data
    if not cfg.dataset_path:
        raise SystemExit("no dataset: pass --data or set [run] dataset_path")
    seq = load_tum(cfg.dataset_path)
    if args.frames is not None:
        seq.frames = seq.frames[:args.frames]
        if seq.gt_poses:
            seq.gt_poses = seq.gt_poses[:args.frames]
    metrics = run_slam(seq, cfg)
    for key in sorted(metrics):
        print(f"{key}: {metrics[key]}")
    return 0


def _load_ckpt_and_data(args):
    cloud, decoders = load_checkpoint(args.checkpoint)
    seq = load_tum(args.data)
    return cloud, decoders, seq


def cmd_render(args) -> int:
    cloud, decoders, seq = _load_ckpt_and_data(args)
    if args.trajectory:
        poses = [p for _, p in datasets.parse_trajectory_file(args.trajectory)]
    elif seq.gt_poses:
        poses = seq.gt_poses
    else:
        raise SystemExit("no pose source: pass --trajectory or provide "
                         "groundtruth.txt")
    k = args.frame
    if not (0 <= k < len(seq.frames)):
        raise SystemExit(f"frame {k} out of range 0..{len(seq.frames) - 1}")
    frame = seq.frames[k]
    latent = decoders.latents.get(frame.frame_id) \
        if decoders.exposure is not None else None
    d_img, c_img, valid = render_frame(
        cloud, decoders, seq.K, poses[k], frame.color, frame.depth,
        DynamicRadiusConfig(), DynamicRadiusConfig().rho,
        stride=args.stride, latent=latent)
    write_ppm(args.output + ".ppm", c_img)
    write_pgm16(args.output + ".pgm", np.where(valid, d_img, 0.0))
    print(f"wrote {args.output}.ppm and {args.output}.pgm "
          f"({valid.mean():.0%} valid)")
    return 0


def cmd_mesh(args) -> int:
    cloud, decoders, seq = _load_ckpt_and_data(args)
    if args.trajectory:
        poses = [p for _, p in datasets.parse_trajectory_file(args.trajectory)]
    elif seq.gt_poses:
        poses = seq.gt_poses
    else:
        raise SystemExit("no pose source: pass --trajectory or provide "
                         "groundtruth.txt")
    n = min(len(poses), len(seq.frames))
    radius_cfg = DynamicRadiusConfig()
    verts, faces, colors, _ = mesh_from_trajectory(
        cloud, decoders, seq.frames[:n], poses[:n], seq.K, radius_cfg,
        radius_cfg.rho, every=args.every, voxel=args.voxel)
    write_ply(args.output, verts, faces, colors)
    print(f"wrote {args.output}: {len(verts)} vertices, {len(faces)} faces")
    return 0


def cmd_evaluate(args) -> int:
    report = {}
    if args.est and args.gt:
        est = datasets.parse_trajectory_file(args.est)
        gt = datasets.parse_trajectory_file(args.gt)
        gt_ts = np.asarray([t for t, _ in gt])
        pairs = []
        for ts, pose in est:
            j = int(np.argmin(np.abs(gt_ts - ts)))
            pairs.append((pose.t, gt[j][1].t))
        est_t = np.stack([a for a, _ in pairs])
        gt_t = np.stack([b for _, b in pairs])
        report["ate_rmse_cm"] = evaluation.ate_rmse(est_t, gt_t) * 100.0
    if args.mesh and args.scene:
        import json

        from .meshing import read_ply
        verts, _, _ = read_ply(args.mesh)
        with open(args.scene, encoding="utf-8") as fh:
            payload = json.load(fh)
        scene_dict = payload.get("scene", payload)
        spec = SyntheticSceneSpec.from_json(json.dumps(scene_dict))
        gt_pts = sample_surface(spec, args.surface_samples,
                                np.random.default_rng(args.seed))
        report.update(evaluation.f_score(verts, gt_pts, tau=args.tau))
    if not report:
        raise SystemExit("nothing to evaluate: pass --est/--gt and/or "
                         "--mesh/--scene")
    for key in sorted(report):
        print(f"{key}: {report[key]}")
    if args.output:
        evaluation.write_metrics_json(args.output, report, exclude=())
    return 0


def cmd_inspect(args) -> int:
    cloud, decoders = load_checkpoint(args.checkpoint)
    n = len(cloud)
    feat_bytes = n * 64 * 8
    pos_bytes = n * 3 * 8
    print(f"checkpoint: {args.checkpoint}")
    print(f"points: {n}")
    print(f"feature memory: {feat_bytes} bytes "
          f"({feat_bytes / 1e6:.2f} MB)")
    print(f"position memory: {pos_bytes} bytes")
    print(f"embedding size total: {feat_bytes + pos_bytes} bytes")
    if n:
        lo = cloud.positions.min(axis=0)
        hi = cloud.positions.max(axis=0)
        print(f"bounds: [{lo[0]:.3f} {lo[1]:.3f} {lo[2]:.3f}] .. "
              f"[{hi[0]:.3f} {hi[1]:.3f} {hi[2]:.3f}]")
    n_params = sum(p.value.size for _, p in decoders.named_parameters())
    print(f"decoder parameters: {n_params}")
    print(f"exposure latents: {len(decoders.latents)}")
    print(f"feature transform: {'on' if decoders.f_transform else 'off'}; "
          f"exposure: {'on' if decoders.exposure else 'off'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="npslam",
                                 description="Dense RGBD SLAM with a neural "
                                             "point-cloud map")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic TUM-layout sequence")
    sp.add_argument("--output", "-o", required=True)
    sp.add_argument("--preset", default="room")
    sp.add_argument("--trajectory", default=None,
                    help="orbit | sphere-orbit | lawnmower")
    sp.add_argument("--frames", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", default="80x60")
    sp.add_argument("--noise", type=float, default=0.0,
                    help="depth noise sigma as a fraction of depth")
    sp.add_argument("--exposure", default=None, metavar="LO,HI",
                    help="per-frame color gain range, e.g. 0.8,1.2")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("run", help="run SLAM on a sequence directory")
    sp.add_argument("--data", default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--profile", default=None,
                    help="replica | tum | scannet | synth")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--output", "-o", default=None)
    sp.add_argument("--frames", type=int, default=None,
                    help="truncate the sequence")
    sp.add_argument("--no-exposure", action="store_true")
    sp.add_argument("--no-ftheta", action="store_true")
    sp.add_argument("--gt-pose", action="store_true",
                    help="bypass tracking, use ground-truth poses")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("render", help="render one frame from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--trajectory", default=None)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--output", "-o", required=True,
                    help="output path prefix (.ppm/.pgm appended)")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("mesh", help="fuse and extract a mesh from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--trajectory", default=None)
    sp.add_argument("--every", type=int, default=5)
    sp.add_argument("--voxel", type=float, default=0.01)
    sp.add_argument("--output", "-o", required=True)
    sp.set_defaults(func=cmd_mesh)

    sp = sub.add_parser("evaluate", help="trajectory / mesh metrics")
    sp.add_argument("--est", default=None, help="estimated trajectory file")
    sp.add_argument("--gt", default=None, help="ground-truth trajectory file")
    sp.add_argument("--mesh", default=None, help="mesh PLY for F-score")
    sp.add_argument("--scene", default=None, help="scene.json for F-score")
    sp.add_argument("--tau", type=float, default=0.01)
    sp.add_argument("--surface-samples", type=int, default=20000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", "-o", default=None, help="metrics JSON path")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("inspect", help="print checkpoint statistics")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
