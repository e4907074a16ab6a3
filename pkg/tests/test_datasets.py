"""Dataset loading, synthesis, and trajectory generation against oracles."""

import numpy as np
import pytest
from PIL import Image

from npslam import datasets, geometry
from npslam.cli import preset_trajectory, scene_preset
from npslam.datasets import (BoxObstacle, DatasetError, Sphere,
                             SyntheticSceneSpec, generate_synthetic, load_tum,
                             look_at_pose, orbit_trajectory, sample_surface,
                             save_tum)
from npslam.geometry import CameraIntrinsics, Pose

K_SMALL = CameraIntrinsics(fx=24.0, fy=24.0, cx=16.0, cy=12.0,
                           width=32, height=24)


# independent scalar ray-caster ----------------------------------------------------

def _scalar_depth(spec, origin, d):
    """Per-ray reimplementation: plane rectangles, geometric sphere test,
    slab-loop box test. `d` is scaled to unit camera z, so the returned
    parameter is a z-depth."""
    best = np.inf
    if spec.room_lo is not None:
        lo, hi = spec.room_lo, spec.room_hi
        for axis in range(3):
            for plane in (lo[axis], hi[axis]):
                if abs(d[axis]) < 1e-300:
                    continue
                t = (plane - origin[axis]) / d[axis]
                if t <= 1e-9:
                    continue
                p = origin + t * d
                others = [a for a in range(3) if a != axis]
                if all(lo[a] - 1e-9 <= p[a] <= hi[a] + 1e-9 for a in others):
                    best = min(best, t)
    for s in spec.spheres:
        u = d / np.linalg.norm(d)
        oc = np.asarray(s.center) - origin
        tc = oc @ u
        d2 = oc @ oc - tc * tc
        if d2 <= s.radius ** 2:
            th = np.sqrt(s.radius ** 2 - d2)
            for te in (tc - th, tc + th):
                tz = te / np.linalg.norm(d)
                if tz > 1e-9:
                    best = min(best, tz)
                    break
    for b in spec.boxes:
        t_near, t_far = -np.inf, np.inf
        ok = True
        for axis in range(3):
            if abs(d[axis]) < 1e-300:
                if not (b.lo[axis] <= origin[axis] <= b.hi[axis]):
                    ok = False
                    break
                continue
            ta = (b.lo[axis] - origin[axis]) / d[axis]
            tb = (b.hi[axis] - origin[axis]) / d[axis]
            t_near = max(t_near, min(ta, tb))
            t_far = min(t_far, max(ta, tb))
        if ok and t_near <= t_far and t_far > 0 and t_near > 1e-9:
            best = min(best, t_near)
    return 0.0 if not np.isfinite(best) else best


def test_raycast_matches_scalar_reimplementation():
    spec, kind = scene_preset("room")
    pose = preset_trajectory(kind, 8)[3]
    uu, vv = np.meshgrid(np.arange(K_SMALL.width), np.arange(K_SMALL.height))
    dirs = geometry.pixel_dirs_cam(uu.ravel(), vv.ravel(), K_SMALL)
    dirs = dirs @ pose.rotation.T
    t, ids = datasets.raycast(spec, pose.t, dirs)
    for i in range(len(dirs)):
        assert abs(t[i] - _scalar_depth(spec, pose.t, dirs[i])) < 1e-9


def test_raycast_sphere_silhouette():
    spec = SyntheticSceneSpec(room_lo=None, room_hi=None,
                              spheres=[Sphere((0.0, 0.0, 1.5), 0.4)],
                              min_hit_fraction=0.05)
    seq = generate_synthetic(spec, K_SMALL, [Pose.identity()],
                             np.random.default_rng(0))
    depth = seq.frames[0].depth
    uu, vv = np.meshgrid(np.arange(K_SMALL.width), np.arange(K_SMALL.height))
    dirs = geometry.pixel_dirs_cam(uu.ravel(), vv.ravel(), K_SMALL)
    want = np.array([_scalar_depth(spec, np.zeros(3), d) for d in dirs])
    assert np.abs(depth.ravel() - want).max() < 1e-9
    assert (depth == 0.0).any() and (depth > 0).any()
    # misses shade to black
    assert np.all(seq.frames[0].color[depth == 0.0] == 0.0)


# synthetic generation --------------------------------------------------------------

def test_frontal_plane_depth():
    spec = SyntheticSceneSpec(room_lo=None, room_hi=None,
                              boxes=[BoxObstacle((-10, -10, 2.0), (10, 10, 4.0))])
    seq = generate_synthetic(spec, K_SMALL, [Pose.identity()],
                             np.random.default_rng(0))
    depth = seq.frames[0].depth
    pp = depth[int(K_SMALL.cy), int(K_SMALL.cx)]
    assert abs(pp - 2.0) < 1e-12
    assert np.all(depth >= 2.0 - 1e-12)


def test_exposure_gain_applied_per_frame():
    spec, _ = scene_preset("room")
    base_pose = preset_trajectory("orbit", 8)[0]
    spec2 = SyntheticSceneSpec(**{**spec.__dict__,
                                  "exposure_gains": [1.0, 1.2]})
    seq = generate_synthetic(spec2, K_SMALL, [base_pose, base_pose],
                             np.random.default_rng(0))
    f0, f1 = seq.frames
    assert np.allclose(f1.color, np.clip(1.2 * f0.color, 0.0, 1.0), atol=1e-12)


def test_depth_noise_seeded_and_multiplicative():
    spec_plain, _ = scene_preset("room")
    spec = SyntheticSceneSpec(**{**spec_plain.__dict__, "noise_sigma": 0.005})
    poses = preset_trajectory("orbit", 4)[:2]
    a = generate_synthetic(spec, K_SMALL, poses, np.random.default_rng(11))
    b = generate_synthetic(spec, K_SMALL, poses, np.random.default_rng(11))
    clean = generate_synthetic(spec_plain, K_SMALL, poses,
                               np.random.default_rng(11))
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.depth, fb.depth)
    rel = (a.frames[0].depth - clean.frames[0].depth) / clean.frames[0].depth
    assert 0.0 < np.abs(rel).max() < 0.05
    assert np.all(a.frames[0].depth >= 0.0)


def test_pose_inside_primitive_raises():
    spec, _ = scene_preset("room")
    inside = Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                  np.array(spec.spheres[0].center))
    with pytest.raises(DatasetError):
        generate_synthetic(spec, K_SMALL, [inside], np.random.default_rng(0))


def test_low_hit_fraction_raises():
    spec = SyntheticSceneSpec(room_lo=None, room_hi=None,
                              spheres=[Sphere((0.0, 0.0, 3.0), 0.05)],
                              min_hit_fraction=0.6)
    with pytest.raises(DatasetError):
        generate_synthetic(spec, K_SMALL, [Pose.identity()],
                           np.random.default_rng(0))


def test_timestamps_strictly_increasing():
    spec, kind = scene_preset("room")
    seq = generate_synthetic(spec, K_SMALL, preset_trajectory(kind, 5),
                             np.random.default_rng(0))
    ts = [f.timestamp for f in seq.frames]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_scene_spec_json_round_trip():
    spec, _ = scene_preset("room")
    again = SyntheticSceneSpec.from_json(spec.to_json())
    assert again == spec


# surface sampling -------------------------------------------------------------------

def test_sample_surface_points_lie_on_surfaces():
    spec, _ = scene_preset("room")
    pts = sample_surface(spec, 500, np.random.default_rng(2))
    assert len(pts) == 500
    lo, hi = np.asarray(spec.room_lo), np.asarray(spec.room_hi)
    for p in pts:
        ds = []
        if np.all(p >= lo - 1e-9) and np.all(p <= hi + 1e-9):
            ds.append(max(min((p - lo).min(), (hi - p).min()), 0.0))
        for s in spec.spheres:
            ds.append(abs(np.linalg.norm(p - np.asarray(s.center)) - s.radius))
        for b in spec.boxes:
            blo, bhi = np.asarray(b.lo), np.asarray(b.hi)
            out = np.maximum(np.maximum(blo - p, 0.0), p - bhi)
            if out.max() > 0:
                ds.append(np.linalg.norm(out))
            else:
                ds.append(min((p - blo).min(), (bhi - p).min()))
        assert min(ds) < 1e-9


def test_sample_surface_area_weighting():
    spec = SyntheticSceneSpec(room_lo=None, room_hi=None,
                              spheres=[Sphere((0, 0, 0), 1.0),
                                       Sphere((5, 0, 0), 0.1)])
    pts = sample_surface(spec, 2000, np.random.default_rng(3))
    near_big = np.linalg.norm(pts - np.array([0.0, 0.0, 0.0]), axis=1) < 2.0
    # area ratio 100:1
    assert near_big.mean() > 0.95


def test_sample_surface_empty_scene_raises():
    with pytest.raises(DatasetError):
        sample_surface(SyntheticSceneSpec(room_lo=None, room_hi=None), 10,
                       np.random.default_rng(0))


# trajectories -----------------------------------------------------------------------

def test_orbit_constant_relative_motion():
    poses = orbit_trajectory((2.0, 1.5, 1.25), radius=0.9, height=1.3,
                             n_frames=12)
    rel0 = poses[0].inverse().compose(poses[1]).matrix()
    for a, b in zip(poses[1:], poses[2:]):
        rel = a.inverse().compose(b).matrix()
        assert np.abs(rel - rel0).max() < 1e-10
    for p in poses:
        assert abs(np.linalg.norm(p.t[:2] - np.array([2.0, 1.5])) - 0.9) < 1e-12
        assert abs(p.t[2] - 1.3) < 1e-12


def test_look_at_pose_axes():
    pose = look_at_pose(np.array([1.0, 0.0, 0.0]), np.array([1.0, 2.0, 0.0]))
    fwd = pose.rotation[:, 2]
    assert np.allclose(fwd, [0.0, 1.0, 0.0], atol=1e-12)
    # rotation orthonormal, right-handed
    R = pose.rotation
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        look_at_pose(np.zeros(3), np.zeros(3))


# TUM layout I/O ---------------------------------------------------------------------

def _write_depth_png(path, value, shape=(6, 8)):
    img = np.full(shape, value, dtype=np.uint16)
    Image.fromarray(img).save(path)


def _write_rgb_png(path, value, shape=(6, 8)):
    img = np.full(shape + (3,), value, dtype=np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def _k_tiny():
    return CameraIntrinsics(fx=8.0, fy=8.0, cx=4.0, cy=3.0, width=8, height=6)


def test_load_tum_depth_scale_and_association(tmp_path):
    d = tmp_path
    (d / "rgb").mkdir()
    (d / "depth").mkdir()
    _write_rgb_png(d / "rgb" / "a.png", 100)
    _write_rgb_png(d / "rgb" / "b.png", 200)
    _write_rgb_png(d / "rgb" / "c.png", 50)
    _write_depth_png(d / "depth" / "a.png", 10000)
    _write_depth_png(d / "depth" / "b.png", 3000)
    (d / "rgb.txt").write_text("# ts file\n1.000 rgb/a.png\n"
                               "1.026 rgb/b.png\n1.100 rgb/c.png\n")
    (d / "depth.txt").write_text("1.005 depth/a.png\n1.030 depth/b.png\n")
    (d / "groundtruth.txt").write_text("1.0 0 0 0 0 0 0 1\n")
    seq = load_tum(str(d), K=_k_tiny())
    # third rgb frame has no depth within 0.02 s
    assert len(seq.frames) == 2
    assert np.all(seq.frames[0].depth == 10000 / 5000.0)
    assert np.all(seq.frames[1].depth == 3000 / 5000.0)
    assert np.all(seq.frames[0].color == 100 / 255.0)
    # quaternion (x,y,z,w)=(0,0,0,1) is the identity rotation
    assert np.allclose(seq.gt_poses[0].rotation, np.eye(3), atol=1e-15)
    assert np.allclose(seq.gt_poses[0].t, 0.0)


def test_load_tum_missing_files_named(tmp_path):
    with pytest.raises(DatasetError, match="rgb.txt"):
        load_tum(str(tmp_path))
    (tmp_path / "rgb.txt").write_text("1.0 rgb/a.png\n")
    with pytest.raises(DatasetError, match="depth.txt"):
        load_tum(str(tmp_path))


def test_load_tum_malformed_line_number(tmp_path):
    (tmp_path / "rgb.txt").write_text("# header\n1.0 rgb/a.png\n"
                                      "1.1 rgb/b.png extra\n")
    (tmp_path / "depth.txt").write_text("1.0 depth/a.png\n")
    with pytest.raises(DatasetError, match=r":3:"):
        load_tum(str(tmp_path))


def test_parse_trajectory_malformed(tmp_path):
    p = tmp_path / "tr.txt"
    p.write_text("1.0 0 0 0 0 0 1\n")   # 7 fields
    with pytest.raises(DatasetError, match=":1:"):
        datasets.parse_trajectory_file(str(p))
    p.write_text("1.0 0 0 zero 0 0 0 1\n")
    with pytest.raises(DatasetError, match="non-numeric"):
        datasets.parse_trajectory_file(str(p))


def test_save_load_round_trip_fixed_point(tmp_path):
    spec, kind = scene_preset("room")
    seq = generate_synthetic(spec, K_SMALL, preset_trajectory(kind, 3),
                             np.random.default_rng(0))
    save_tum(str(tmp_path / "a"), seq)
    first = load_tum(str(tmp_path / "a"))
    save_tum(str(tmp_path / "b"), first)
    second = load_tum(str(tmp_path / "b"))
    assert len(first.frames) == len(second.frames) == 3
    for fa, fb in zip(first.frames, second.frames):
        assert np.array_equal(fa.color, fb.color)
        assert np.array_equal(fa.depth, fb.depth)
        assert fa.timestamp == fb.timestamp
    for pa, pb in zip(first.gt_poses, second.gt_poses):
        assert np.array_equal(pa.q, pb.q) and np.array_equal(pa.t, pb.t)
    # intrinsics and scene spec ride along in the sidecar
    assert second.K == K_SMALL
    assert second.scene == spec
    # quantization: loaded depth within half a depth-scale step
    assert np.abs(first.frames[0].depth - seq.frames[0].depth).max() \
        <= 0.5 / 5000.0 + 1e-12
