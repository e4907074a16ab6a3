"""Frame-to-model camera tracking.

The camera pose is a raw quaternion + translation pair optimized by Adam
against the variance-weighted re-rendering loss; the quaternion is
renormalized on the tape each evaluation, so no manifold retraction is
needed at the small per-frame motions encountered here. Map parameters stay
frozen; when exposure compensation is on, the frame's latent code is the
one map-side variable optimized jointly with the pose. The pose with the
lowest observed loss over all iterates is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry, tape
from .decoders import DecoderBundle
from .geometry import CameraIntrinsics, Pose, RGBDFrame
from .optim import AdamState, adam_step
from .pointcloud import (DynamicRadiusConfig, NeuralPointCloud,
                         color_gradient_magnitude, dynamic_radius)
from .renderer import render_batch, sample_depths_guided
from .tape import Node, Parameter, constant

log = logging.getLogger(__name__)

VAR_EPS = 1e-10  # m^2, floors the depth variance for delta-like rays


@dataclass
class TrackingConfig:
    n_pixels: int = 1500
    iterations: int = 40
    lr: float = 0.002
    lambda_color: float = 0.5
    gradient_pool: int | None = None  # draw from the top-N gradient pixels
    optimize_exposure: bool = True

    def __post_init__(self):
        if self.n_pixels <= 0 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("tracking config fields must be positive")


def rotation_node(q: Node) -> Node:
    """(3,3) rotation from a w-first quaternion node, normalized on tape."""
    qn = q / tape.sqrt(tape.reduce_sum(tape.square(q)))
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    row0 = tape.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z),
                       2.0 * (x * z + w * y)], axis=0)
    row1 = tape.stack([2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z),
                       2.0 * (y * z - w * x)], axis=0)
    row2 = tape.stack([2.0 * (x * z - w * y), 2.0 * (y * z + w * x),
                       1.0 - 2.0 * (x * x + y * y)], axis=0)
    return tape.stack([row0, row1, row2], axis=0)


def sample_tracking_pixels(frame: RGBDFrame, cfg: TrackingConfig,
                           rng: np.random.Generator):
    """(us, vs) with valid depth; uniform or drawn from a top-gradient pool."""
    H, W = frame.depth.shape
    valid = frame.depth.ravel() > 0
    if cfg.gradient_pool is None:
        pool = np.flatnonzero(valid)
    else:
        grad = color_gradient_magnitude(frame.color).ravel()
        order = np.lexsort((np.arange(H * W), -grad))
        pool = order[:cfg.gradient_pool]
        pool = pool[valid[pool]]
    if len(pool) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    n = min(cfg.n_pixels, len(pool))
    flat = rng.choice(pool, size=n, replace=False)
    vs, us = np.unravel_index(flat, (H, W))
    return us, vs


def tracking_loss(res, depth_ref: np.ndarray, color_ref: np.ndarray,
                  lambda_color: float) -> Node:
    """Variance-weighted depth L1 plus color L1, summed over valid pixels."""
    rows = np.flatnonzero(res.valid)
    d_hat = tape.gather(res.depth, rows)
    c_hat = tape.gather(res.color, rows)
    s_hat = tape.gather(res.var, rows)
    d_term = tape.div(tape.absolute(d_hat - constant(depth_ref[rows])),
                      tape.sqrt(s_hat + VAR_EPS))
    c_term = tape.reduce_mean(tape.absolute(c_hat - constant(color_ref[rows])),
                              axis=-1)
    return tape.reduce_sum(d_term) + lambda_color * tape.reduce_sum(c_term)


def track_frame(cloud: NeuralPointCloud, decoders: DecoderBundle,
                frame: RGBDFrame, K: CameraIntrinsics, init_pose: Pose,
                cfg: TrackingConfig, radius_cfg: DynamicRadiusConfig,
                rng: np.random.Generator) -> tuple[Pose, dict]:
    """Optimize the camera pose of one frame against the frozen map.

    Returns the best-loss pose and a stats dict. Cloud and decoder weights
    are not touched; only the frame's exposure latent may move.
    """
    us, vs = sample_tracking_pixels(frame, cfg, rng)
    if len(us) == 0:
        log.warning("frame %d: no valid-depth pixels, tracking skipped",
                    frame.frame_id)
        return init_pose, {"iterations": 0, "loss": float("nan"), "skipped": True}

    dirs_cam = geometry.pixel_dirs_cam(us, vs, K)
    depth_ref = frame.depth[vs, us]
    color_ref = frame.color[vs, us]
    radii = dynamic_radius(color_gradient_magnitude(frame.color),
                           radius_cfg)[vs, us]
    z_vals = sample_depths_guided(depth_ref, radius_cfg.rho)

    q = Parameter(init_pose.q.copy(), name="pose.q")
    t = Parameter(init_pose.t.copy(), name="pose.t")
    params = [q, t]
    latent = None
    if cfg.optimize_exposure and decoders.exposure is not None:
        latent = decoders.latent_for(frame.frame_id)
        params.append(latent)
    state = AdamState(params, lr=cfg.lr)

    best_loss = np.inf
    best_q, best_t = q.value.copy(), t.value.copy()
    last_loss = np.nan
    for it in range(cfg.iterations + 1):
        rot = rotation_node(q)
        dirs = tape.matmul(constant(dirs_cam), tape.transpose(rot))
        res = render_batch(cloud, decoders, t, dirs, z_vals, radii,
                           latent=latent)
        if not res.valid.any():
            log.warning("frame %d: no renderable pixels at iteration %d",
                        frame.frame_id, it)
            break
        loss = tracking_loss(res, depth_ref, color_ref, cfg.lambda_color)
        lval = float(loss.value)
        if np.isfinite(lval):
            last_loss = lval
            if lval < best_loss:
                best_loss = lval
                best_q, best_t = q.value.copy(), t.value.copy()
        if it == cfg.iterations:
            break  # final evaluation scores the last step's pose
        if not np.isfinite(lval):
            continue  # leave parameters where they were
        tape.backward(loss)
        adam_step(state)

    pose = Pose(q=best_q, t=best_t)
    return pose, {"iterations": cfg.iterations, "loss": best_loss,
                  "last_loss": last_loss, "skipped": False}
