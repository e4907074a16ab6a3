"""Camera model, SE(3) poses and RGBD frames.

Conventions used throughout the package:
  * poses are camera-to-world, stored as unit quaternion (w, x, y, z) plus
    translation in meters;
  * depth values are z-depths measured along the optical axis (TUM style),
    with 0 marking an invalid pixel;
  * rays carry a unit direction and a per-pixel scale that converts a
    z-depth into a range along that direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0:
        raise InvalidInputError("zero quaternion")
    q = q / n
    if q[0] < 0:  # canonical sign, keeps round-trips stable
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return _quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform. Immutable after construction."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(np.asarray(self.q, dtype=np.float64))
        t = np.asarray(self.t, dtype=np.float64).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other (apply `other` first)."""
        return Pose(quat_multiply(self.q, other.q),
                    self.rotation @ other.t + self.t)

    def inverse(self) -> "Pose":
        q_inv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to world frame."""
        return points @ self.rotation.T + self.t

    def transform_inverse(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        return (points - self.t) @ self.rotation


@dataclass
class RGBDFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    timestamp: float
    frame_id: int
    exposure_latent_id: int | None = None

    def __post_init__(self):
        self.color = np.clip(np.asarray(self.color, dtype=np.float64), 0.0, 1.0)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2 or self.color.shape != self.depth.shape + (3,):
            raise InvalidInputError(
                f"color/depth shapes disagree: {self.color.shape} vs {self.depth.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidInputError("depth must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class Ray:
    """World-frame ray with unit direction.

    `depth_scale` converts a z-depth to a range: point(z) = origin + z * depth_scale * direction.
    """

    origin: np.ndarray
    direction: np.ndarray
    depth_scale: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise InvalidInputError(f"ray direction not unit (norm {n})")

    def point_at(self, z_depth: np.ndarray) -> np.ndarray:
        z = np.asarray(z_depth)[..., None]
        return self.origin + z * self.depth_scale * self.direction


def pixel_dirs_cam(us: np.ndarray, vs: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame direction vectors with unit z-component, shape (..., 3)."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    return np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)


def make_rays(us: np.ndarray, vs: np.ndarray, K: CameraIntrinsics, pose: Pose):
    """Batched ray construction.

    Returns (origins (3,), unit directions (N, 3), depth scales (N,)).
    """
    d_cam = pixel_dirs_cam(us, vs, K)
    scale = np.linalg.norm(d_cam, axis=-1)
    d_unit = d_cam / scale[..., None]
    d_world = d_unit @ pose.rotation.T
    return pose.t.copy(), d_world, scale


def unproject(u: float, v: float, depth: float, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Pixel plus z-depth to a world point."""
    if depth <= 0:
        raise InvalidInputError(f"unproject needs positive depth, got {depth}")
    p_cam = pixel_dirs_cam(np.float64(u), np.float64(v), K) * depth
    return pose.transform(p_cam)


def unproject_many(us, vs, depths, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    p_cam = pixel_dirs_cam(np.asarray(us, dtype=np.float64),
                           np.asarray(vs, dtype=np.float64), K)
    return pose.transform(p_cam * np.asarray(depths, dtype=np.float64)[..., None])


def project(point: np.ndarray, K: CameraIntrinsics, pose: Pose):
    """World point to (u, v, z_cam). z_cam <= 0 flags a point behind the camera."""
    p_cam = pose.transform_inverse(np.asarray(point, dtype=np.float64))
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p_cam[..., 0] / z + K.cx
        v = K.fy * p_cam[..., 1] / z + K.cy
    return u, v, z


def constant_speed_extrapolate(prev2: Pose, prev1: Pose) -> Pose:
    """Predict the next pose assuming the last relative motion repeats."""
    return prev1.compose(prev2.inverse().compose(prev1))
