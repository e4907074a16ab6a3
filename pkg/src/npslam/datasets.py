"""Sequence ingestion and synthesis.

Real data follows the TUM-RGBD directory layout (rgb.txt / depth.txt /
groundtruth.txt plus PNG images; depth stored as 16-bit PNG in units of
1/5000 m). The synthetic generator ray-casts an analytic scene — a room box
interior plus sphere/box obstacles shaded with a checkerboard-plus-sinusoid
texture — producing exact depth, ground-truth poses, and an analytic
surface sampler for point-set metrics. Synthetic sequences serialize to the
same TUM layout (with a scene.json sidecar) so both paths load identically.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry
from .geometry import CameraIntrinsics, Pose, RGBDFrame

log = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0           # TUM convention: PNG value / 5000 = meters
ASSOC_MAX_DT = 0.02            # seconds, color/depth pairing tolerance
DEFAULT_FPS = 30.0

# fallback intrinsics for TUM directories without a sidecar (freiburg1)
TUM_DEFAULT_K = CameraIntrinsics(fx=517.3, fy=516.5, cx=318.6, cy=255.3,
                                 width=640, height=480)


class DatasetError(Exception):
    pass


@dataclass
class Sequence:
    frames: list[RGBDFrame]
    K: CameraIntrinsics
    gt_poses: list[Pose] | None = None
    scene: "SyntheticSceneSpec | None" = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# analytic scene
# ---------------------------------------------------------------------------


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class BoxObstacle:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class SyntheticSceneSpec:
    """Analytic room + obstacles with a procedural wall texture."""

    room_lo: tuple[float, float, float] | None = (0.0, 0.0, 0.0)
    room_hi: tuple[float, float, float] | None = (4.0, 3.0, 2.5)
    room_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    spheres: list[Sphere] = field(default_factory=list)
    boxes: list[BoxObstacle] = field(default_factory=list)
    checker_period: float = 0.4
    checker_amplitude: float = 0.25
    checker_phase: float = 0.137
    lowfreq_amplitude: float = 0.15
    lowfreq_cycles: float = 0.33   # cycles per meter of the color wash
    noise_sigma: float = 0.0       # depth noise as a fraction of depth
    exposure_gains: list[float] | None = None  # per-frame gain on color
    min_hit_fraction: float = 0.6

    def to_json(self) -> str:
        d = {
            "room_lo": self.room_lo, "room_hi": self.room_hi,
            "room_tint": self.room_tint,
            "spheres": [[s.center, s.radius, s.tint] for s in self.spheres],
            "boxes": [[b.lo, b.hi, b.tint] for b in self.boxes],
            "checker_period": self.checker_period,
            "checker_amplitude": self.checker_amplitude,
            "checker_phase": self.checker_phase,
            "lowfreq_amplitude": self.lowfreq_amplitude,
            "lowfreq_cycles": self.lowfreq_cycles,
            "noise_sigma": self.noise_sigma,
            "exposure_gains": self.exposure_gains,
            "min_hit_fraction": self.min_hit_fraction,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SyntheticSceneSpec":
        d = json.loads(text)
        spec = SyntheticSceneSpec(
            room_lo=tuple(d["room_lo"]) if d["room_lo"] else None,
            room_hi=tuple(d["room_hi"]) if d["room_hi"] else None,
            room_tint=tuple(d.get("room_tint", (1.0, 1.0, 1.0))),
            spheres=[Sphere(tuple(c), r, tuple(t)) for c, r, t in d["spheres"]],
            boxes=[BoxObstacle(tuple(lo), tuple(hi), tuple(t))
                   for lo, hi, t in d["boxes"]],
            checker_period=d["checker_period"],
            checker_amplitude=d["checker_amplitude"],
            checker_phase=d["checker_phase"],
            lowfreq_amplitude=d["lowfreq_amplitude"],
            lowfreq_cycles=d["lowfreq_cycles"],
            noise_sigma=d["noise_sigma"],
            exposure_gains=d["exposure_gains"],
            min_hit_fraction=d["min_hit_fraction"],
        )
        return spec


def _ray_room_exit(origin, dirs, lo, hi):
    """Distance to the room box seen from inside (exit through a wall)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (np.asarray(hi) - origin) / dirs
        t_lo = (np.asarray(lo) - origin) / dirs
    t_exit = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    return np.min(t_exit, axis=-1)


def _ray_sphere(origin, dirs, center, radius):
    """Smallest positive hit parameter, inf on miss (dirs need not be unit)."""
    oc = origin - np.asarray(center)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    cand = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
    t[ok] = cand[ok]
    return t


def _ray_box(origin, dirs, lo, hi):
    """Entry parameter into an axis-aligned box, inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (np.asarray(lo) - origin) / dirs
        t2 = (np.asarray(hi) - origin) / dirs
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    hit = (t_near <= t_far) & (t_far > 0) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def raycast(spec: SyntheticSceneSpec, origin: np.ndarray,
            dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hit parameter and primitive id for each ray; id -1 means miss.

    Ids: 0 = room walls, then spheres in order, then boxes in order. With
    dirs scaled to unit camera z, the returned parameter is the z-depth.
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)

    def consider(t, pid):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = pid

    if spec.room_lo is not None:
        consider(_ray_room_exit(origin, dirs, spec.room_lo, spec.room_hi), 0)
    pid = 1
    for s in spec.spheres:
        consider(_ray_sphere(origin, dirs, s.center, s.radius), pid)
        pid += 1
    for b in spec.boxes:
        consider(_ray_box(origin, dirs, b.lo, b.hi), pid)
        pid += 1
    best_t[~np.isfinite(best_t)] = 0.0
    best_id[best_t == 0.0] = -1
    return best_t, best_id


def _tints(spec: SyntheticSceneSpec) -> np.ndarray:
    rows = [spec.room_tint] + [s.tint for s in spec.spheres] + \
        [b.tint for b in spec.boxes]
    return np.asarray(rows, dtype=np.float64)


def shade(spec: SyntheticSceneSpec, points: np.ndarray,
          hit_ids: np.ndarray) -> np.ndarray:
    """Procedural texture color for surface points; misses shade to 0."""
    p = np.asarray(points, dtype=np.float64) + spec.checker_phase
    s = np.sign(np.prod(np.sin(2.0 * np.pi * p / spec.checker_period), axis=-1))
    base = 0.5 + spec.checker_amplitude * s
    waves = 2.0 * np.pi * spec.lowfreq_cycles
    wash = np.stack([
        np.sin(waves * points[:, 0] + 0.5),
        np.sin(waves * points[:, 1] + 1.7),
        np.sin(waves * (points[:, 2] + points[:, 0]) + 3.1),
    ], axis=-1)
    color = base[:, None] + spec.lowfreq_amplitude * wash
    tint = np.ones((len(points), 3))
    hit = hit_ids >= 0
    tint[hit] = _tints(spec)[hit_ids[hit]]
    color = np.clip(color * tint, 0.0, 1.0)
    color[~hit] = 0.0
    return color


def _pose_inside_obstacle(spec: SyntheticSceneSpec, eye: np.ndarray) -> bool:
    if spec.room_lo is not None:
        lo, hi = np.asarray(spec.room_lo), np.asarray(spec.room_hi)
        if np.any(eye <= lo) or np.any(eye >= hi):
            return True
    for s in spec.spheres:
        if np.linalg.norm(eye - np.asarray(s.center)) <= s.radius:
            return True
    for b in spec.boxes:
        if np.all(eye >= np.asarray(b.lo)) and np.all(eye <= np.asarray(b.hi)):
            return True
    return False


def generate_synthetic(spec: SyntheticSceneSpec, K: CameraIntrinsics,
                       poses: list[Pose], rng: np.random.Generator,
                       fps: float = DEFAULT_FPS, name: str = "synthetic",
                       ) -> Sequence:
    """Ray-cast the scene from each pose into an RGBD sequence.

    Depth is the exact z-depth (0 where a ray escapes the scene); color is
    the procedural shading with optional per-frame exposure gain; optional
    multiplicative Gaussian depth noise is applied last.
    """
    H, W = K.height, K.width
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    dirs_cam = geometry.pixel_dirs_cam(uu.ravel(), vv.ravel(), K)
    frames: list[RGBDFrame] = []
    for k, pose in enumerate(poses):
        if _pose_inside_obstacle(spec, pose.t):
            raise DatasetError(f"camera pose {k} lies inside scene geometry")
        dirs = dirs_cam @ pose.rotation.T
        t, ids = raycast(spec, pose.t, dirs)
        hit_frac = float((ids >= 0).mean())
        if hit_frac < spec.min_hit_fraction:
            raise DatasetError(
                f"pose {k}: only {hit_frac:.0%} of pixels hit geometry "
                f"(need >= {spec.min_hit_fraction:.0%})")
        pts = pose.t + t[:, None] * dirs
        color = shade(spec, pts, ids).reshape(H, W, 3)
        if spec.exposure_gains is not None:
            g = spec.exposure_gains[k % len(spec.exposure_gains)]
            color = np.clip(g * color, 0.0, 1.0)
        depth = t.reshape(H, W)
        if spec.noise_sigma > 0:
            depth = depth * (1.0 + spec.noise_sigma * rng.standard_normal(depth.shape))
            depth = np.maximum(depth, 0.0)
        frames.append(RGBDFrame(color=color, depth=depth, timestamp=k / fps,
                                frame_id=k))
    return Sequence(frames=frames, K=K, gt_poses=list(poses), scene=spec,
                    name=name)


def sample_surface(spec: SyntheticSceneSpec, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Area-weighted random points on all scene surfaces (world coords)."""
    elements = []  # (area, sampler)
    if spec.room_lo is not None:
        lo = np.asarray(spec.room_lo, dtype=np.float64)
        hi = np.asarray(spec.room_hi, dtype=np.float64)
        for axis in range(3):
            for side_val in (lo[axis], hi[axis]):
                o_axes = [a for a in range(3) if a != axis]
                extent = hi[o_axes] - lo[o_axes]
                area = float(extent[0] * extent[1])

                def sampler(m, axis=axis, side_val=side_val,
                            o_axes=o_axes, lo=lo, hi=hi):
                    pts = np.empty((m, 3))
                    pts[:, axis] = side_val
                    for a in o_axes:
                        pts[:, a] = rng.uniform(lo[a], hi[a], size=m)
                    return pts
                elements.append((area, sampler))
    for s in spec.spheres:
        def sampler(m, s=s):
            d = rng.standard_normal((m, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return np.asarray(s.center) + s.radius * d
        elements.append((4.0 * np.pi * s.radius ** 2, sampler))
    for b in spec.boxes:
        lo = np.asarray(b.lo, dtype=np.float64)
        hi = np.asarray(b.hi, dtype=np.float64)
        for axis in range(3):
            for side_val in (lo[axis], hi[axis]):
                o_axes = [a for a in range(3) if a != axis]
                extent = hi[o_axes] - lo[o_axes]

                def sampler(m, axis=axis, side_val=side_val, o_axes=o_axes,
                            lo=lo, hi=hi):
                    pts = np.empty((m, 3))
                    pts[:, axis] = side_val
                    for a in o_axes:
                        pts[:, a] = rng.uniform(lo[a], hi[a], size=m)
                    return pts
                elements.append((float(extent[0] * extent[1]), sampler))
    if not elements:
        raise DatasetError("scene has no surfaces to sample")
    areas = np.asarray([a for a, _ in elements])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [elements[i][1](c) for i, c in enumerate(counts) if c > 0]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def look_at_pose(eye: np.ndarray, target: np.ndarray,
                 up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z toward target, +y roughly downward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise ValueError("look_at target coincides with the eye")
    z = fwd / nf
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick any horizontal right
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    return Pose(q=geometry.quat_from_matrix(np.stack([x, y, z], axis=1)), t=eye)


def orbit_trajectory(center, radius: float, height: float, n_frames: int,
                     revolutions: float = 1.0,
                     target_height: float | None = None) -> list[Pose]:
    """Circle around `center` at constant angular speed, looking inward.

    The frame-to-frame relative motion is a constant rigid transform, so a
    constant-speed motion model predicts these poses exactly.
    """
    center = np.asarray(center, dtype=np.float64)
    target = center.copy()
    if target_height is not None:
        target[2] = target_height
    poses = []
    for k in range(n_frames):
        a = 2.0 * np.pi * revolutions * k / n_frames
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        eye[2] = height
        poses.append(look_at_pose(eye, target))
    return poses


def lawnmower_trajectory(start, row_axis=0, col_axis=1, row_len: float = 1.0,
                         n_rows: int = 4, row_gap: float = 0.3,
                         n_frames: int = 100, look_dir=(0.0, 1.0, 0.0),
                         look_dist: float = 2.0) -> list[Pose]:
    """Back-and-forth scan rows with a fixed viewing direction."""
    start = np.asarray(start, dtype=np.float64)
    look_dir = np.asarray(look_dir, dtype=np.float64)
    per_row = max(n_frames // n_rows, 1)
    poses = []
    for k in range(n_frames):
        row = min(k // per_row, n_rows - 1)
        frac = (k - row * per_row) / max(per_row - 1, 1)
        if row % 2 == 1:
            frac = 1.0 - frac
        eye = start.copy()
        eye[row_axis] += frac * row_len
        eye[col_axis] += row * row_gap
        poses.append(look_at_pose(eye, eye + look_dist * look_dir))
    return poses


# ---------------------------------------------------------------------------
# TUM-format I/O
# ---------------------------------------------------------------------------


def _parse_list_file(path: str) -> list[tuple[float, str]]:
    if not os.path.isfile(path):
        raise DatasetError(f"missing required file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected "
                                   f"'timestamp filename', got {line!r}")
            try:
                out.append((float(parts[0]), parts[1]))
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: bad timestamp") from e
    return out


def parse_trajectory_file(path: str) -> list[tuple[float, Pose]]:
    """TUM trajectory lines: timestamp tx ty tz qx qy qz qw."""
    if not os.path.isfile(path):
        raise DatasetError(f"missing required file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, "
                                   f"got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: non-numeric field") from e
            t = np.array(vals[1:4])
            qx, qy, qz, qw = vals[4:8]
            out.append((vals[0], Pose(q=np.array([qw, qx, qy, qz]), t=t)))
    return out


def write_trajectory_file(path: str, stamped_poses) -> None:
    """Writes TUM lines 'timestamp tx ty tz qx qy qz qw'."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in stamped_poses:
            w, x, y, z = pose.q
            tx, ty, tz = pose.t
            fh.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def _nearest(sorted_ts: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(sorted_ts, t))
    best, best_d = None, np.inf
    for j in (i - 1, i):
        if 0 <= j < len(sorted_ts):
            d = abs(sorted_ts[j] - t)
            if d < best_d:
                best, best_d = j, d
    return best


def load_tum(directory: str, K: CameraIntrinsics | None = None) -> Sequence:
    """Load a TUM-layout sequence directory.

    Color/depth pairs are associated by nearest timestamp within 0.02 s;
    unmatched color frames are dropped (count logged). Intrinsics come from
    the caller, a scene.json sidecar, or the freiburg1 defaults, in that
    order of preference.
    """
    rgb_list = _parse_list_file(os.path.join(directory, "rgb.txt"))
    depth_list = _parse_list_file(os.path.join(directory, "depth.txt"))
    depth_ts = np.asarray([t for t, _ in depth_list])

    scene = None
    scene_path = os.path.join(directory, "scene.json")
    if os.path.isfile(scene_path):
        with open(scene_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if "camera" in payload:
            cam = payload["camera"]
            if K is None:
                K = CameraIntrinsics(**cam)
            scene = SyntheticSceneSpec.from_json(json.dumps(payload["scene"]))
        else:
            scene = SyntheticSceneSpec.from_json(json.dumps(payload))
    if K is None:
        K = TUM_DEFAULT_K

    gt = None
    gt_path = os.path.join(directory, "groundtruth.txt")
    if os.path.isfile(gt_path):
        gt = parse_trajectory_file(gt_path)
        gt_ts = np.asarray([t for t, _ in gt])

    frames: list[RGBDFrame] = []
    gt_poses: list[Pose] = []
    dropped = 0
    for ts, rgb_rel in rgb_list:
        j = _nearest(depth_ts, ts)
        if j is None or abs(depth_ts[j] - ts) > ASSOC_MAX_DT:
            dropped += 1
            continue
        color = np.asarray(Image.open(os.path.join(directory, rgb_rel)),
                           dtype=np.float64)[..., :3] / 255.0
        depth_raw = np.asarray(Image.open(
            os.path.join(directory, depth_list[j][1])))
        depth = depth_raw.astype(np.float64) / DEPTH_SCALE
        frame = RGBDFrame(color=color, depth=depth, timestamp=ts,
                          frame_id=len(frames))
        frames.append(frame)
        if gt:
            gt_poses.append(gt[_nearest(gt_ts, ts)][1])
    if dropped:
        log.info("load_tum(%s): dropped %d unmatched color frames",
                 directory, dropped)
    if not frames:
        raise DatasetError(f"no associable frames in {directory}")
    return Sequence(frames=frames, K=K, gt_poses=gt_poses if gt else None,
                    scene=scene, name=os.path.basename(os.path.normpath(directory)))


def save_tum(directory: str, seq: Sequence) -> None:
    """Write a sequence in TUM layout (+ scene.json for synthetic scenes)."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines, depth_lines = [], []
    for i, frame in enumerate(seq.frames):
        rgb_rel = f"rgb/{i:06d}.png"
        depth_rel = f"depth/{i:06d}.png"
        rgb8 = np.clip(np.round(frame.color * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(os.path.join(directory, rgb_rel))
        d16 = np.clip(np.round(frame.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(os.path.join(directory, depth_rel))
        rgb_lines.append(f"{frame.timestamp:.6f} {rgb_rel}")
        depth_lines.append(f"{frame.timestamp:.6f} {depth_rel}")
    with open(os.path.join(directory, "rgb.txt"), "w", encoding="utf-8") as fh:
        fh.write("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w", encoding="utf-8") as fh:
        fh.write("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    if seq.gt_poses:
        write_trajectory_file(
            os.path.join(directory, "groundtruth.txt"),
            [(f.timestamp, p) for f, p in zip(seq.frames, seq.gt_poses)])
    if seq.scene is not None:
        payload = {
            "camera": {"fx": seq.K.fx, "fy": seq.K.fy, "cx": seq.K.cx,
                       "cy": seq.K.cy, "width": seq.K.width,
                       "height": seq.K.height},
            "scene": json.loads(seq.scene.to_json()),
        }
        with open(os.path.join(directory, "scene.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
